use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{partition_regions, select_region, DamConfig, Region};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Bindings, ParamStore, Tape, Tensor, Var};

/// Row-wise softmax of a `[n, k]` logits slice.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Everything a single image's forward pass exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Class probabilities of each subregion, in partition order.
    pub region_probs: Vec<Vec<f64>>,
    pub selected: Option<usize>,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
    /// Final pre-pool feature map `[C, h, w]` (the CAM substrate).
    pub final_map: Tensor,
}

impl ForwardTrace {
    pub fn probs(&self) -> Vec<f64> {
        softmax_rows(&self.logits, self.logits.len()).remove(0)
    }
}

/// Tape handles produced by one batched forward pass.
pub struct TapeForward {
    pub logits: Var,
    pub feature: Var,
    pub final_map: Var,
    /// Local-network logits `[N, K]` for every region.
    pub local_logits: Vec<Var>,
    /// Selected region per sample (empty without a local branch).
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

/// The attention model: a config and its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DamModel {
    pub config: DamConfig,
    pub params: ParamStore,
    regions: Vec<Region>,
}

fn stage_name(i: usize, part: &str) -> String {
    format!("stage{i}.{part}")
}

impl DamModel {
    /// Expected `(name, shape)` of every parameter, in no particular order.
    pub fn param_shapes(config: &DamConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let mut out = Vec::new();
        let mut conv = |name: String, co: usize, ci: usize, k: usize| {
            out.push((format!("{name}.w"), vec![co, ci, k, k]));
            out.push((format!("{name}.b"), vec![co]));
        };
        let mut c_in = config.in_channels;
        for (i, s) in config.stages.iter().enumerate() {
            conv(stage_name(i, "conv"), s.width, c_in, s.kernel);
            if config.residual {
                conv(stage_name(i, "res"), s.width, s.width, 3);
            }
            c_in = if i == config.fusion_stage {
                config.fused_channels()
            } else {
                s.width
            };
        }
        let k = config.num_classes;
        let lk = config.local_kernel;
        let (l1, l2) = config.local_widths();
        if config.local_branch {
            let c2 = config.stages[config.region_stage].width;
            conv("local.conv1".into(), l1, c2, lk);
            conv("local.conv2".into(), l2, l1, lk);
        }
        if config.da_mode {
            conv("global.conv1g".into(), config.da_widths.0, c_in, 1);
            conv("global.conv2g".into(), config.da_widths.1, config.da_widths.0, 1);
            c_in = config.da_widths.1;
        }
        if config.local_branch {
            out.push(("local.fc.w".into(), vec![k, l2]));
            out.push(("local.fc.b".into(), vec![k]));
        }
        out.push(("fc.w".into(), vec![config.feature_dim, c_in]));
        out.push(("fc.b".into(), vec![config.feature_dim]));
        out.push(("head.w".into(), vec![k, config.feature_dim]));
        out.push(("head.b".into(), vec![k]));
        Ok(out)
    }

    /// He-normal weights and zero biases from a seeded stream.
    pub fn new(config: DamConfig, seed: u64) -> Result<Self> {
        let mut shapes = Self::param_shapes(&config)?;
        shapes.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let value = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(format!("init for {name}: {e}")))?;
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.insert(name, value);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: DamConfig, params: ParamStore) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params.value(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("parameter {name} is not finite")));
            }
        }
        let (_, h, w) = config.stage_shapes()?[config.region_stage];
        let regions = if config.local_branch {
            partition_regions((h, w), &config.schemes)?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            params,
            regions,
        })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    fn conv(&self, tape: &mut Tape, b: &Bindings, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = b.get(&format!("{name}.w"))?;
        let bias = b.get(&format!("{name}.b"))?;
        Ok(tape.conv2d(x, w, bias, stride, pad)?)
    }

    fn conv_relu(&self, tape: &mut Tape, b: &Bindings, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(tape, b, name, x, stride, pad)?;
        Ok(tape.relu(y)?)
    }

    fn stage(&self, tape: &mut Tape, b: &Bindings, i: usize, x: Var) -> Result<Var> {
        let s = self.config.stages[i];
        let y = self.conv_relu(tape, b, &stage_name(i, "conv"), x, s.stride, s.pad)?;
        if !self.config.residual {
            return Ok(y);
        }
        let r = self.conv_relu(tape, b, &stage_name(i, "res"), y, 1, 1)?;
        Ok(tape.add(y, r)?)
    }

    /// Local network on one region of the conv-2 map: returns the
    /// `[N, K]` logits and the conv-2 local feature map.
    pub fn local_forward(&self, tape: &mut Tape, b: &Bindings, conv2: Var, region: &Region) -> Result<(Var, Var)> {
        let (oh, ow) = self.config.roi_hw;
        let pad = self.config.local_kernel / 2;
        let x = tape.roi_avg_pool(conv2, region.rect, oh, ow)?;
        let x = self.conv_relu(tape, b, "local.conv1", x, 1, pad)?;
        let map = self.conv_relu(tape, b, "local.conv2", x, 1, pad)?;
        let pooled = tape.adaptive_avg_pool(map, 1, 1)?;
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, vec![n, c])?;
        let logits = tape.linear(flat, b.get("local.fc.w")?, b.get("local.fc.b")?)?;
        Ok((logits, map))
    }

    /// Batched forward pass of `input [N, C, H, W]` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, b: &Bindings, input: Var) -> Result<TapeForward> {
        let cfg = &self.config;
        let shape = tape.shape(input).to_vec();
        let want = [cfg.in_channels, cfg.input_hw.0, cfg.input_hw.1];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Data(format!(
                "input shape {shape:?} does not match model input [N, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        let n = shape[0];
        let k = cfg.num_classes;
        let mut x = input;
        let mut local_logits = Vec::new();
        let mut selected = Vec::new();
        let mut local_maps = Vec::new();
        for i in 0..cfg.stages.len() {
            x = self.stage(tape, b, i, x)?;
            if cfg.local_branch && i == cfg.region_stage {
                for region in &self.regions {
                    let (logits, map) = self.local_forward(tape, b, x, region)?;
                    local_logits.push(logits);
                    local_maps.push(map);
                }
                let probs: Vec<Vec<Vec<f64>>> = local_logits
                    .iter()
                    .map(|&l| softmax_rows(tape.value(l).data(), k))
                    .collect();
                for s in 0..n {
                    let per_region: Vec<&[f64]> = probs.iter().map(|p| p[s].as_slice()).collect();
                    selected.push(select_region(&per_region)?);
                }
            }
            if cfg.local_branch && i == cfg.fusion_stage {
                let (_, _, h, w) = tape.value(x).dims4("fusion")?;
                let chosen = tape.gather_batch(&local_maps, &selected)?;
                let pooled = tape.adaptive_avg_pool(chosen, h, w)?;
                x = tape.channel_concat(&[x, pooled])?;
            }
        }
        if cfg.da_mode {
            x = self.conv_relu(tape, b, "global.conv1g", x, 1, 0)?;
            x = self.conv_relu(tape, b, "global.conv2g", x, 1, 0)?;
        }
        let final_map = x;
        let pooled = tape.adaptive_avg_pool(final_map, 1, 1)?;
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, vec![n, c])?;
        let feature = tape.linear(flat, b.get("fc.w")?, b.get("fc.b")?)?;
        let logits = tape.linear(feature, b.get("head.w")?, b.get("head.b")?)?;
        Ok(TapeForward {
            logits,
            feature,
            final_map,
            local_logits,
            selected,
        })
    }

    /// Forward pass on a stacked batch `[N, C, H, W]` without gradients.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<ForwardTrace>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let f = self.forward_on_tape(&mut tape, &b, x)?;
        let n = images.shape()[0];
        let k = self.config.num_classes;
        let local: Vec<Vec<Vec<f64>>> = f
            .local_logits
            .iter()
            .map(|&l| softmax_rows(tape.value(l).data(), k))
            .collect();
        let logits = tape.value(f.logits).data();
        let feature = tape.value(f.feature);
        let d = feature.shape()[1];
        let fmap = tape.value(f.final_map);
        let (_, c, h, w) = fmap.dims4("forward")?;
        (0..n)
            .map(|s| {
                Ok(ForwardTrace {
                    region_probs: local.iter().map(|p| p[s].clone()).collect(),
                    selected: f.selected.get(s).copied(),
                    logits: logits[s * k..(s + 1) * k].to_vec(),
                    feature: feature.data()[s * d..(s + 1) * d].to_vec(),
                    final_map: Tensor::new(vec![c, h, w], fmap.data()[s * c * h * w..(s + 1) * c * h * w].to_vec())?,
                })
            })
            .collect()
    }

    /// Binds parameters as constants so no gradient bookkeeping happens.
    fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let mut frozen = self.params.clone();
        frozen.iter_mut().for_each(|(_, p)| p.trainable = false);
        frozen.bind(tape)
    }

    /// Argmax label and softmax probabilities for each image.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self
            .forward(images)?
            .into_iter()
            .map(|t| {
                let probs = t.probs();
                Prediction {
                    label: argmax(&probs),
                    probs,
                }
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let config = serde_json::to_string(&self.config)?;
        write_checkpoint(BufWriter::new(file), &self.params, &config)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let ck = read_checkpoint(BufReader::new(file))?;
        let config: DamConfig = serde_json::from_str(&ck.config)?;
        Self::from_params(config, ck.params)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

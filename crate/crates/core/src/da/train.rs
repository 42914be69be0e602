use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_coral, loss_da, ClassFeatures};
use crate::dam::{evaluate, DamModel, Dataset, EpochMetrics, Prediction};
use crate::error::{Error, Result};
use crate::geo::{DatasetManifest, Domain, Label};
use crate::tensor::{clip_grad_norm, sgd_step, LrSchedule, Tape, Tensor, Var};

/// Feature scaling ahead of the alignment loss. The scatter sums grow with
/// the fourth power of the feature scale, so unscaled features let the loss
/// run away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScaling {
    None,
    /// Each row to unit length. All-colinear features then zero the loss
    /// while the head still separates classes by norm.
    Rows,
    /// The whole batch by one shared root-mean-square row norm.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaTrainConfig {
    /// Weight of the alignment loss.
    pub lambda: f64,
    /// Total batch size, split evenly between source and target.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Use the class-agnostic CORAL loss instead of the class-conditional one.
    pub baseline_loss: bool,
    /// Include target pseudo-labels in the classification loss.
    pub target_ce: bool,
    /// How `fc` features are scaled before the alignment loss.
    pub feature_scaling: FeatureScaling,
    /// Joint gradient norm cap applied before each step. Large lambda
    /// otherwise throws the weights far enough to overflow.
    pub max_grad_norm: Option<f64>,
}

impl Default for DaTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            batch_size: 16,
            epochs: 50,
            lr0: 1e-4,
            lr_decay: 0.5,
            decay_every: 10,
            seed: 0,
            baseline_loss: false,
            target_ce: true,
            feature_scaling: FeatureScaling::Batch,
            max_grad_norm: Some(5.0),
        }
    }
}

impl DaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || !(self.lr0 > 0.0) {
            return Err(Error::Config("epochs must be >= 1 and lr0 positive".into()));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {m}")));
            }
        }
        Ok(())
    }
}

/// Labels every target entry with the model's prediction and flags it as
/// pseudo-labeled. Images are read relative to `dir`.
pub fn pseudo_label(target: &DatasetManifest, dir: impl AsRef<Path>, model: &DamModel) -> Result<DatasetManifest> {
    if target.entries.is_empty() {
        return Err(Error::Data("target manifest is empty".into()));
    }
    let data = Dataset::from_manifest(target, dir)?;
    let (_, _, preds) = evaluate(model, &data, 32)?;
    let mut out = target.clone();
    for (e, p) in out.entries.iter_mut().zip(&preds) {
        e.label = Label::from_index(p.label).ok_or_else(|| Error::Data(format!("class {} has no label", p.label)))?;
        e.pseudo = true;
        e.domain = Domain::Target;
    }
    Ok(out)
}

/// In-memory variant of [`pseudo_label`]: a copy of `data` carrying the
/// model's labels, plus the predictions.
pub fn pseudo_label_dataset(data: &Dataset, model: &DamModel) -> Result<(Dataset, Vec<Prediction>)> {
    let (_, _, preds) = evaluate(model, data, 32)?;
    let mut out = data.clone();
    out.labels = preds.iter().map(|p| p.label).collect();
    Ok((out, preds))
}

/// Loss terms of one mixed batch.
pub struct DaBatch {
    pub tape: Tape,
    pub total: Var,
    pub classification: Var,
    pub alignment: Var,
    pub correct: usize,
    pub bindings: crate::tensor::Bindings,
}

fn class_rows(tape: &mut Tape, feats: Var, labels: &[usize], offset: usize, class: usize) -> Result<Option<Var>> {
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| offset + i)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.select_rows(feats, &rows)?))
}

/// Builds the loss of one batch made of `src_idx` from `source` followed by
/// `tgt_idx` from `target` (whose labels are pseudo-labels).
pub fn da_batch_loss(
    model: &DamModel,
    source: &Dataset,
    target: &Dataset,
    src_idx: &[usize],
    tgt_idx: &[usize],
    cfg: &DaTrainConfig,
) -> Result<DaBatch> {
    let (ns, nt) = (src_idx.len(), tgt_idx.len());
    let mut items: Vec<Tensor> = Vec::with_capacity(ns + nt);
    items.extend(src_idx.iter().map(|&i| source.images[i].clone()));
    items.extend(tgt_idx.iter().map(|&i| target.images[i].clone()));
    let src_labels = source.batch_labels(src_idx);
    let tgt_labels = target.batch_labels(tgt_idx);

    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let x = tape.constant(Tensor::stack(&items)?);
    let fwd = model.forward_on_tape(&mut tape, &bindings, x)?;

    let mut labels = src_labels.clone();
    labels.extend(&tgt_labels);
    let (ce_logits, ce_labels) = if cfg.target_ce {
        (fwd.logits, labels.clone())
    } else {
        let rows: Vec<usize> = (0..ns).collect();
        (tape.select_rows(fwd.logits, &rows)?, src_labels.clone())
    };
    let classification = tape.softmax_cross_entropy(ce_logits, &ce_labels)?;
    let correct = crate::dam::count_correct_rows(&tape, ce_logits, &ce_labels);

    let feats = match cfg.feature_scaling {
        FeatureScaling::None => fwd.feature,
        FeatureScaling::Rows => tape.l2_normalize_rows(fwd.feature)?,
        FeatureScaling::Batch => tape.rms_normalize(fwd.feature)?,
    };
    let d = tape.shape(feats)[1];
    let alignment = if cfg.baseline_loss {
        let s = tape.select_rows(feats, &(0..ns).collect::<Vec<_>>())?;
        let t = tape.select_rows(feats, &(ns..ns + nt).collect::<Vec<_>>())?;
        loss_coral(&mut tape, s, t)?
    } else {
        let (dangerous, safe) = (Label::Dangerous.index(), Label::Safe.index());
        let sf = ClassFeatures {
            x: class_rows(&mut tape, feats, &src_labels, 0, dangerous)?,
            y: class_rows(&mut tape, feats, &src_labels, 0, safe)?,
            d,
        };
        let tf = ClassFeatures {
            x: class_rows(&mut tape, feats, &tgt_labels, ns, dangerous)?,
            y: class_rows(&mut tape, feats, &tgt_labels, ns, safe)?,
            d,
        };
        if [sf.x, sf.y, tf.x, tf.y].iter().any(Option::is_none) {
            log::debug!("batch is missing a class in one domain; its scatter terms are zero");
        }
        loss_da(&mut tape, sf, tf)?
    };
    let total = if cfg.lambda > 0.0 {
        let weighted = tape.scale(alignment, cfg.lambda)?;
        tape.add(classification, weighted)?
    } else {
        classification
    };
    Ok(DaBatch {
        tape,
        total,
        classification,
        alignment,
        correct,
        bindings,
    })
}

/// Joint training on half-source, half-target batches. Metrics rows:
/// `train` (mean total loss, classification accuracy), `align` (mean
/// alignment loss, accuracy left empty as NaN) and, when `val` is given,
/// `val` rows evaluated on it after every epoch.
pub fn train_dam_da(
    model: &mut DamModel,
    source: &Dataset,
    target: &Dataset,
    val: Option<&Dataset>,
    cfg: &DaTrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if !model.config.da_mode {
        log::warn!("adaptation training on a model built without da_mode");
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("adaptation needs non-empty source and target sets".into()));
    }
    let half = cfg.batch_size / 2;
    let schedule = LrSchedule {
        lr0: cfg.lr0,
        decay: cfg.lr_decay,
        every: cfg.decay_every,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s_order: Vec<usize> = (0..source.len()).collect();
    let mut t_order: Vec<usize> = (0..target.len()).collect();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let (mut loss_sum, mut align_sum, mut correct, mut seen, mut steps) = (0.0, 0.0, 0, 0, 0);
        let mut peak_norm = 0.0f64;
        for (si, ti) in s_order.chunks(half).zip(t_order.chunks(half)) {
            let mut batch = da_batch_loss(model, source, target, si, ti, cfg)?;
            batch.tape.backward(batch.total)?;
            model.params.accumulate_grads(&batch.tape, &batch.bindings)?;
            let norm = clip_grad_norm(&mut model.params, cfg.max_grad_norm.unwrap_or(f64::INFINITY));
            peak_norm = peak_norm.max(norm);
            sgd_step(&mut model.params, lr)?;
            loss_sum += batch.tape.value(batch.total).item()?;
            align_sum += batch.tape.value(batch.alignment).item()?;
            correct += batch.correct;
            seen += if cfg.target_ce { si.len() + ti.len() } else { si.len() };
            steps += 1;
        }
        let steps_f = steps.max(1) as f64;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / steps_f,
            accuracy: correct as f64 / seen.max(1) as f64,
        });
        metrics.push(EpochMetrics {
            epoch,
            split: "align".into(),
            loss: align_sum / steps_f,
            accuracy: f64::NAN,
        });
        log::info!(
            "epoch {epoch} loss {:.4} align {:.4} peak grad norm {peak_norm:.3}",
            loss_sum / steps_f,
            align_sum / steps_f
        );
        if let Some(v) = val {
            let (loss, accuracy, _) = evaluate(model, v, 32)?;
            metrics.push(EpochMetrics {
                epoch,
                split: "val".into(),
                loss,
                accuracy,
            });
        }
    }
    Ok(metrics)
}

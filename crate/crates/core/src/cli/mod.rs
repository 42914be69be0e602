//! Command-line workflows. Every subcommand reads one [`RunConfig`],
//! writes its outputs into a run directory together with the resolved
//! config and a `run_manifest.json` listing every produced file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{PathsConfig, PipelineConfig, RunConfig};

use crate::da::{pseudo_label, train_dam_da};
use crate::dam::{evaluate, image_tensor, train_dam, write_metrics_csv, DamConfig, DamModel, Dataset};
use crate::error::{Error, Result};
use crate::eval::{cam, metrics_from_indices, safety_map_export, CellPrediction};
use crate::geo::{
    balance, build_grid, ingest_accidents, kmeans_bin, score_cells, synth_generate, write_synth, AccidentRecord,
    CellIndex, DatasetManifest, GridSpec, Label, Split,
};
use crate::imageio::RgbImage;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "roadsafe", version, about = "Road-safety maps from overhead imagery")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Io {
    /// Primary input file.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse an accident CSV into `records.jsonl`.
    Ingest(Io),
    /// Grid accident records and count accidents per cell.
    Grid(Io),
    /// Two-means binning of cell safety scores into safe/dangerous.
    Label(Io),
    /// Downsample the majority class of a manifest.
    Balance {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a synthetic image dataset.
    Synth,
    /// Train the attention model on a manifest's train split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Label a target manifest with a trained model.
    PseudoLabel {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Joint source/target training with the alignment loss.
    TrainDa {
        /// Labeled source manifest (train split is used).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Pseudo-labeled target manifest.
        #[arg(long)]
        target_manifest: Option<PathBuf>,
        /// Source checkpoint used to warm-start matching parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Class activation map of one image, written as PGM.
    Cam {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Class index (0 safe, 1 dangerous).
        #[arg(long, default_value_t = 1)]
        class: usize,
    },
    /// Export per-cell predictions as a CSV table and a PPM raster.
    MapExport {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// CSV with `col,row,label` and optionally `prob_dangerous`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Grid(_) => "grid",
            Command::Label(_) => "label",
            Command::Balance { .. } => "balance",
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::PseudoLabel { .. } => "pseudo-label",
            Command::TrainDa { .. } => "train-da",
            Command::Eval { .. } => "eval",
            Command::Cam { .. } => "cam",
            Command::MapExport { .. } => "map-export",
        }
    }
}

/// Files produced by one run, keyed by file name relative to the run dir.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<String>,
    /// Scalar results worth keeping beside the files.
    pub summary: BTreeMap<String, f64>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.files.push(name.to_string());
        self.dir.join(name)
    }

    fn note(&mut self, key: &str, value: f64) {
        self.manifest.summary.insert(key.to_string(), value);
    }
}

fn need(opt: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or paths.{what} in the config)")))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a manifest and rewrites its image paths to absolute ones so the
/// result can be stored anywhere.
fn read_manifest_abs(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let m = DatasetManifest::read(path)?;
    let dir = manifest_dir(path);
    let dir = fs::canonicalize(&dir).map_err(|e| Error::file(&dir, e))?;
    let mut abs = m.clone();
    for e in &mut abs.entries {
        e.image = dir.join(&e.image).to_string_lossy().into_owned();
    }
    Ok((abs, dir))
}

fn load_model(path: &Path) -> Result<DamModel> {
    DamModel::load(path)
}

fn split_filter(name: &str) -> Result<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Error::Config(format!("unknown split {other}"))),
    }
}

fn check_input_size(model: &DamConfig, data: &Dataset) -> Result<()> {
    if let Some(img) = data.images.first() {
        let hw = (img.shape()[1], img.shape()[2]);
        if hw != model.input_hw {
            return Err(Error::Data(format!(
                "images are {}x{} but the model expects {}x{}",
                hw.0, hw.1, model.input_hw.0, model.input_hw.1
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CellRow {
    col: u32,
    row: u32,
    center_lat: f64,
    center_lon: f64,
    safety_score: u32,
}

#[derive(Serialize)]
struct LabelRow {
    col: Option<u32>,
    row: Option<u32>,
    safety_score: f64,
    label: Label,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    image: &'a str,
    col: Option<u32>,
    row: Option<u32>,
    label: Label,
    predicted: Label,
    prob_dangerous: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

fn label_of(i: usize) -> Result<Label> {
    Label::from_index(i).ok_or_else(|| Error::Data(format!("class {i} has no label")))
}

fn execute(cmd: &Command, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let paths = &cfg.paths;
    match cmd {
        Command::Ingest(io) => {
            let input = need(&io.input, &paths.input, "input")?;
            let file = File::open(&input).map_err(|e| Error::file(&input, e))?;
            let report = ingest_accidents(file)?;
            let mut text = String::new();
            for r in &report.records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            let out = run.path("records.jsonl");
            fs::write(&out, text).map_err(|e| Error::file(&out, e))?;
            run.note("records", report.records.len() as f64);
            run.note("skipped", report.skipped as f64);
        }
        Command::Grid(io) => {
            let input = need(&io.input, &paths.input, "input")?;
            let text = fs::read_to_string(&input).map_err(|e| Error::file(&input, e))?;
            let records: Vec<AccidentRecord> = if input.extension().is_some_and(|e| e == "csv") {
                ingest_accidents(text.as_bytes())?.records
            } else {
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<std::result::Result<_, _>>()?
            };
            let (grid, assign) = build_grid(&records, cfg.pipeline.cell_size_m)?;
            let cells = score_cells(&grid, &assign)?;
            write_json(&run.path("grid.json"), &grid)?;
            let mut w = csv::Writer::from_path(run.path("cells.csv"))?;
            for c in &cells {
                w.serialize(CellRow {
                    col: c.index.col,
                    row: c.index.row,
                    center_lat: c.center_lat,
                    center_lon: c.center_lon,
                    safety_score: c.safety_score,
                })?;
            }
            w.flush()?;
            run.note("records", records.len() as f64);
            run.note("cells", cells.len() as f64);
            run.note("score_sum", cells.iter().map(|c| c.safety_score as f64).sum());
        }
        Command::Label(io) => {
            let input = need(&io.input, &paths.input, "input")?;
            let mut reader = csv::Reader::from_path(&input)?;
            let headers = reader.headers()?.clone();
            let find = |n: &str| headers.iter().position(|h| h == n);
            let score_i = find("safety_score").ok_or_else(|| Error::MissingColumns("safety_score".into()))?;
            let (col_i, row_i) = (find("col"), find("row"));
            let mut scores = Vec::new();
            let mut cells = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                let parse_u = |i: Option<usize>| -> Result<Option<u32>> {
                    i.map(|i| {
                        rec[i]
                            .trim()
                            .parse::<u32>()
                            .map_err(|e| Error::Data(format!("bad cell index: {e}")))
                    })
                    .transpose()
                };
                let s: f64 = rec[score_i]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Data(format!("bad safety_score {:?}: {e}", &rec[score_i])))?;
                scores.push(s);
                cells.push((parse_u(col_i)?, parse_u(row_i)?));
            }
            let bins = kmeans_bin(&scores, &cfg.pipeline.labeling)?;
            let mut w = csv::Writer::from_path(run.path("labels.csv"))?;
            for ((s, (col, row)), label) in scores.iter().zip(&cells).zip(&bins.assignments) {
                w.serialize(LabelRow {
                    col: *col,
                    row: *row,
                    safety_score: *s,
                    label: *label,
                })?;
            }
            w.flush()?;
            run.note("safe", bins.count(Label::Safe) as f64);
            run.note("dangerous", bins.count(Label::Dangerous) as f64);
            run.note("degenerate", bins.degenerate as u8 as f64);
        }
        Command::Balance { manifest } => {
            let path = need(manifest, &paths.manifest, "manifest")?;
            let (m, _) = read_manifest_abs(&path)?;
            let b = balance(&m, cfg.seed)?;
            b.write(run.path("manifest.jsonl"))?;
            run.note("per_class", b.count(Label::Safe) as f64);
        }
        Command::Synth => {
            let set = synth_generate(&cfg.synth)?;
            for f in write_synth(&set, &run.dir, "manifest.jsonl")? {
                run.manifest.files.push(f);
            }
            run.note("images", set.images.len() as f64);
        }
        Command::Train { manifest } => {
            let path = need(manifest, &paths.manifest, "manifest")?;
            let (m, _) = read_manifest_abs(&path)?;
            let train = Dataset::from_manifest(&m.split(Split::Train), "")?;
            let val_m = m.split(Split::Val);
            let val = if val_m.entries.is_empty() {
                None
            } else {
                Some(Dataset::from_manifest(&val_m, "")?)
            };
            check_input_size(&cfg.model, &train)?;
            let mut model = DamModel::new(cfg.model.clone(), cfg.seed)?;
            let metrics = train_dam(&mut model, &train, val.as_ref(), &cfg.train)?;
            model.save(run.path("model.ckpt"))?;
            write_metrics_csv(run.path("metrics.csv"), &metrics)?;
            if let Some(last) = metrics.last() {
                run.note("final_accuracy", last.accuracy);
            }
        }
        Command::PseudoLabel { manifest, checkpoint } => {
            let path = need(manifest, &paths.target_manifest, "target_manifest")?;
            let ck = need(checkpoint, &paths.checkpoint, "checkpoint")?;
            let (m, _) = read_manifest_abs(&path)?;
            let model = load_model(&ck)?;
            let labeled = pseudo_label(&m, "", &model)?;
            let agree = labeled
                .entries
                .iter()
                .zip(&m.entries)
                .filter(|(a, b)| a.label == b.label)
                .count();
            labeled.write(run.path("pseudo_manifest.jsonl"))?;
            run.note("agreement_with_input_labels", agree as f64 / m.entries.len() as f64);
        }
        Command::TrainDa {
            manifest,
            target_manifest,
            checkpoint,
        } => {
            let src_path = need(manifest, &paths.manifest, "manifest")?;
            let tgt_path = need(target_manifest, &paths.target_manifest, "target_manifest")?;
            let (src, _) = read_manifest_abs(&src_path)?;
            let (tgt, _) = read_manifest_abs(&tgt_path)?;
            if tgt.entries.iter().any(|e| !e.pseudo) {
                log::warn!("target manifest has entries without pseudo-labels");
            }
            let source = Dataset::from_manifest(&src.split(Split::Train), "")?;
            let target = Dataset::from_manifest(&tgt, "")?;
            let model_cfg = DamConfig {
                da_mode: true,
                ..cfg.model.clone()
            };
            check_input_size(&model_cfg, &source)?;
            let mut model = DamModel::new(model_cfg, cfg.seed)?;
            if let Some(ck) = checkpoint.clone().or_else(|| paths.checkpoint.clone()) {
                let init = load_model(&ck)?;
                let copied = model.params.load_matching(&init.params);
                run.note("warm_started_params", copied.len() as f64);
            }
            let metrics = train_dam_da(&mut model, &source, &target, None, &cfg.da)?;
            model.save(run.path("model_da.ckpt"))?;
            write_metrics_csv(run.path("metrics.csv"), &metrics)?;
        }
        Command::Eval {
            manifest,
            checkpoint,
            split,
        } => {
            let path = need(manifest, &paths.manifest, "manifest")?;
            let ck = need(checkpoint, &paths.checkpoint, "checkpoint")?;
            let (m, _) = read_manifest_abs(&path)?;
            let m = match split_filter(split)? {
                Some(s) => m.split(s),
                None => m,
            };
            let data = Dataset::from_manifest(&m, "")?;
            let model = load_model(&ck)?;
            check_input_size(&model.config, &data)?;
            let (_, _, preds) = evaluate(&model, &data, 32)?;
            let predicted: Vec<usize> = preds.iter().map(|p| p.label).collect();
            let met = metrics_from_indices(&predicted, &data.labels)?;
            write_json(&run.path("metrics.json"), &met)?;
            let mut w = csv::Writer::from_path(run.path("predictions.csv"))?;
            for (e, p) in m.entries.iter().zip(&preds) {
                w.serialize(PredictionRow {
                    image: Path::new(&e.image)
                        .file_name()
                        .and_then(|f| f.to_str())
                        .unwrap_or(&e.image),
                    col: e.cell.map(|c| c.col),
                    row: e.cell.map(|c| c.row),
                    label: e.label,
                    predicted: label_of(p.label)?,
                    prob_dangerous: p.probs[Label::Dangerous.index()],
                })?;
            }
            w.flush()?;
            run.note("accuracy", met.accuracy);
            run.note("fpr", met.fpr);
        }
        Command::Cam {
            image,
            checkpoint,
            class,
        } => {
            let img_path = need(image, &paths.image, "image")?;
            let ck = need(checkpoint, &paths.checkpoint, "checkpoint")?;
            let model = load_model(&ck)?;
            let img = RgbImage::read_ppm(&img_path)?;
            let map = cam(&model, &image_tensor(&img), *class)?;
            map.write_pgm(run.path("cam.pgm"))?;
            let (x, y) = map.peak();
            run.note("peak_x", x as f64);
            run.note("peak_y", y as f64);
            run.note("constant", map.constant as u8 as f64);
        }
        Command::MapExport { grid, input } => {
            let grid_path = need(grid, &paths.grid, "grid")?;
            let input = need(input, &paths.input, "input")?;
            let text = fs::read_to_string(&grid_path).map_err(|e| Error::file(&grid_path, e))?;
            let grid: GridSpec = serde_json::from_str(&text)?;
            let preds = read_cell_predictions(&input)?;
            run.manifest.files.push("safety_map.csv".into());
            run.manifest.files.push("safety_map.ppm".into());
            safety_map_export(&grid, &preds, &run.dir, "safety_map")?;
            let dangerous = preds.iter().filter(|p| p.label == Label::Dangerous).count();
            run.note("dangerous_cells", dangerous as f64);
        }
    }
    Ok(())
}

fn read_cell_predictions(path: &Path) -> Result<Vec<CellPrediction>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |n: &str| headers.iter().position(|h| h == n);
    let label_i = find("predicted").or_else(|| find("label"));
    let (Some(col_i), Some(row_i), Some(label_i)) = (find("col"), find("row"), label_i) else {
        return Err(Error::MissingColumns("col, row, label".into()));
    };
    let prob_i = find("prob_dangerous");
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad number {:?}: {e}", &rec[i])))
        };
        let label = label_of(num(label_i)? as usize)?;
        out.push(CellPrediction {
            index: CellIndex::new(num(col_i)? as u32, num(row_i)? as u32),
            label,
            prob_dangerous: match prob_i {
                Some(i) => num(i)?,
                None => label.index() as f64,
            },
        });
    }
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::KeyMissing { .. } => 1,
        _ => 2,
    }
}

/// Parses `argv` and runs one subcommand. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command line and returns the run directory.
pub fn run_cli(cli: &Cli) -> Result<PathBuf> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed)?;
    let name = cli.command.name();
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.paths.run_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let mut run = Run {
        dir: dir.clone(),
        manifest: RunManifest {
            command: name.to_string(),
            seed: cfg.seed,
            ..Default::default()
        },
    };
    write_json(&run.path(RESOLVED_CONFIG), &cfg)?;
    execute(&cli.command, &cfg, &mut run)?;
    run.manifest.files.push(RUN_MANIFEST.into());
    write_json(&dir.join(RUN_MANIFEST), &run.manifest)?;
    Ok(dir)
}

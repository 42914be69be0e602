use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::da::DaTrainConfig;
use crate::dam::{DamConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::geo::{LabelingConfig, SplitFractions, SynthConfig, DEFAULT_CELL_SIZE_M};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub cell_size_m: f64,
    pub fractions: SplitFractions,
    pub labeling: LabelingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cell_size_m: DEFAULT_CELL_SIZE_M,
            fractions: SplitFractions::default(),
            labeling: LabelingConfig::default(),
        }
    }
}

/// Input and output locations. Relative paths resolve against the working
/// directory; any of them can also be given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub run_dir: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

/// One document holding every knob of every subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every seeded stage; copied into the stage configs on resolve.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub model: DamConfig,
    pub train: TrainConfig,
    pub da: DaTrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies a seed override and propagates the seed to every stage.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.synth.fractions = self.pipeline.fractions;
        self.train.seed = self.seed;
        self.da.seed = self.seed;
        self.pipeline.labeling.seed = self.seed;
        self.pipeline.fractions.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"widths": [1]}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::default().resolve(Some(7)).unwrap();
        assert_eq!((c.seed, c.synth.seed, c.train.seed, c.da.seed), (7, 7, 7, 7));
    }
}

//! Dataset manifests: a JSON-lines file whose first line is a header and
//! whose remaining lines are one entry each.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CellIndex, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub seed: u64,
    pub generator_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub label: Label,
    pub domain: Domain,
    pub cell: Option<CellIndex>,
    pub split: Split,
    /// Label produced by a model rather than by annotation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

/// Fractions for train / val / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn new(seed: u64, generator_version: impl Into<String>) -> Self {
        Self {
            header: ManifestHeader {
                seed,
                generator_version: generator_version.into(),
            },
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image.as_str()) {
                return Err(Error::Data(format!("duplicate image reference {}", e.image)));
            }
        }
        Ok(())
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            header: self.header.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        self.filter(|e| e.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines.next().ok_or_else(|| Error::Data("manifest is empty".into()))?;
        let header: ManifestHeader = serde_json::from_str(header_line)?;
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let m = Self { header, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Downsamples the majority class to the minority count by seeded sampling
/// without replacement. Survivors keep their relative order.
pub fn balance(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let safe = manifest.count(Label::Safe);
    let dangerous = manifest.count(Label::Dangerous);
    if safe == 0 || dangerous == 0 {
        return Err(Error::Data(format!(
            "cannot balance: {safe} safe and {dangerous} dangerous entries"
        )));
    }
    let (majority, keep) = if safe >= dangerous {
        (Label::Safe, dangerous)
    } else {
        (Label::Dangerous, safe)
    };
    let majority_pos: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == majority)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; manifest.entries.len()];
    for k in index::sample(&mut rng, majority_pos.len(), keep) {
        chosen[majority_pos[k]] = true;
    }
    Ok(manifest.filter_indexed(|i, e| e.label != majority || chosen[i]))
}

impl DatasetManifest {
    fn filter_indexed(&self, keep: impl Fn(usize, &ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            header: self.header.clone(),
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, e)| keep(*i, e))
                .map(|(_, e)| e.clone())
                .collect(),
        }
    }
}

/// Assigns splits per class so each split keeps the class ratio. Within a
/// class the order is a seeded shuffle; the entry order itself is unchanged.
pub fn assign_splits(manifest: &mut DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<()> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [Label::Safe, Label::Dangerous] {
        let mut pos: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        pos.shuffle(&mut rng);
        let n = pos.len();
        let n_train = (fractions.train * n as f64).round() as usize;
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train.min(n));
        for (k, &i) in pos.iter().enumerate() {
            manifest.entries[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(())
}

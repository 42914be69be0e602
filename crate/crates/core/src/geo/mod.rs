//! From raw accident records to a gridded, labeled, balanced image dataset.

mod accidents;
mod grid;
mod kmeans;
mod manifest;
mod synth;
mod tiles;

pub use accidents::{ingest_accidents, AccidentRecord, IngestReport, ACCIDENT_COLUMNS};
pub use grid::{build_grid, score_cells, Cell, CellIndex, GridSpec, DEFAULT_CELL_SIZE_M, EARTH_RADIUS_M};
pub use kmeans::{kmeans_bin, within_ss, Binning, LabelingConfig};
pub use manifest::{
    assign_splits, balance, DatasetManifest, Domain, ManifestEntry, ManifestHeader, Split, SplitFractions,
};
pub use synth::{
    synth_generate, write_synth, DomainStyle, PixelBox, SynthConfig, SynthImage, SynthSet, STRIP_RGB, STRIP_THRESHOLD,
    SYNTH_VERSION,
};
pub use tiles::{tile_cache_path, tile_url, KeySource, STATIC_MAPS_KEY_ENV};

use serde::{Deserialize, Serialize};

/// Cell class. Serialized as `0` (safe) and `1` (dangerous).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Safe,
    Dangerous,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Safe => 0,
            Label::Dangerous => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Safe),
            1 => Some(Label::Dangerous),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Safe => "safe",
            Label::Dangerous => "dangerous",
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        Label::from_index(v as usize).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

//! The attention model: a conv backbone whose conv-2 map is cut into
//! subregions, a local network that scores each subregion, and fusion of the
//! most confident subregion's features into the backbone after conv 4.

mod config;
mod data;
mod model;
mod regions;
mod train;

pub use config::{ConvSpec, DamConfig, MapShape, SchemeKind, SubregionScheme};
pub use data::{image_tensor, Dataset};
pub use model::{argmax, softmax_rows, DamModel, ForwardTrace, Prediction, TapeForward};
pub use regions::{partition_regions, select_region, Region};
pub use train::{count_correct_rows, evaluate, train_dam, write_metrics_csv, EpochMetrics, TrainConfig};

//! Metrics, class activation maps and safety-map export.

mod cam;
mod export;
mod metrics;

pub use cam::{bilinear_resize, cam, cam_weights, CamMap};
pub use export::{safety_map_export, CellPrediction, DANGEROUS_RGB, SAFE_RGB};
pub use metrics::{metrics, metrics_from_indices, metrics_with_abstentions, Confusion, Metrics, UndefinedFlags};

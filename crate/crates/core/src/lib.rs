//! Road-safety mapping from overhead imagery: a region-guided attention
//! classifier, class-conditional covariance domain adaptation, and the
//! accident-to-label grid pipeline that produces its training data.

pub mod cli;
pub mod da;
pub mod dam;
pub mod error;
pub mod eval;
pub mod geo;
pub mod imageio;
pub mod tensor;

pub use error::{Error, Result};
pub use geo::Label;
pub use tensor::{Tape, Tensor, TensorError, Var};

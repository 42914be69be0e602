//! Domain adaptation: pseudo-labels for the unlabeled target domain and
//! joint training that aligns class-conditional feature scatter across
//! domains.

mod cov;
mod train;

pub use cov::{
    cov_between, cov_between_matrix, cov_within, cov_within_matrix, loss_coral, loss_coral_value, loss_da,
    loss_da_value, ClassFeatures, FeatureBatch,
};
pub use train::{
    da_batch_loss, pseudo_label, pseudo_label_dataset, train_dam_da, DaBatch, DaTrainConfig, FeatureScaling,
};

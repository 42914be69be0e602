use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, DamModel, Dataset, Prediction, TapeForward};
use crate::error::{Error, Result};
use crate::tensor::{sgd_step, Bindings, LrSchedule, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Weight of an auxiliary cross-entropy on every subregion's local
    /// logits. Zero (the default) trains the local branch through the fused
    /// features only.
    pub local_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr0: 1e-4,
            lr_decay: 0.5,
            decay_every: 10,
            seed: 0,
            target_accuracy: None,
            local_loss_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            decay: self.lr_decay,
            every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.local_loss_weight < 0.0 {
            return Err(Error::Config("lr0 must be positive and local_loss_weight >= 0".into()));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Classification loss for a forward pass: mean cross-entropy on the final
/// logits plus the optional auxiliary local term.
pub(crate) fn classification_loss(
    tape: &mut Tape,
    fwd: &TapeForward,
    labels: &[usize],
    local_loss_weight: f64,
) -> Result<Var> {
    let mut loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    if local_loss_weight > 0.0 && !fwd.local_logits.is_empty() {
        let scale = local_loss_weight / fwd.local_logits.len() as f64;
        for &l in &fwd.local_logits {
            let ce = tape.softmax_cross_entropy(l, labels)?;
            let ce = tape.scale(ce, scale)?;
            loss = tape.add(loss, ce)?;
        }
    }
    Ok(loss)
}

/// Rows of `logits` whose argmax equals the label.
pub fn count_correct_rows(tape: &Tape, logits: Var, labels: &[usize]) -> usize {
    let t = tape.value(logits);
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Runs one forward/backward pass and accumulates parameter gradients.
/// Returns the tape, bindings and forward handles for callers that add
/// terms of their own before calling backward.
pub(crate) fn forward_batch(model: &DamModel, data: &Dataset, idx: &[usize]) -> Result<(Tape, Bindings, TapeForward)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let x = tape.constant(data.batch(idx)?);
    let fwd = model.forward_on_tape(&mut tape, &b, x)?;
    Ok((tape, b, fwd))
}

/// Mean loss, accuracy and predictions over a dataset, in batches.
pub fn evaluate(model: &DamModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64, Vec<Prediction>)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let images = data.batch(idx)?;
        let labels = data.batch_labels(idx);
        let p = model.predict(&images)?;
        for (pr, &l) in p.iter().zip(&labels) {
            loss_sum -= pr.probs[l].max(f64::MIN_POSITIVE).ln();
        }
        preds.extend(p);
    }
    let correct = preds.iter().zip(&data.labels).filter(|(p, &l)| p.label == l).count();
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n, preds))
}

/// Mini-batch SGD on the classification loss. Returns one `train` row per
/// epoch (mean batch loss and running accuracy) and, given a validation
/// set, one `val` row evaluated after the epoch's updates.
pub fn train_dam(
    model: &mut DamModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (safe, dangerous) = (train.count(0), train.count(1));
    if safe != dangerous {
        log::warn!("training set is unbalanced: {safe} safe vs {dangerous} dangerous");
    }
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let labels = train.batch_labels(idx);
            let (mut tape, b, fwd) = forward_batch(model, train, idx)?;
            let loss = classification_loss(&mut tape, &fwd, &labels, cfg.local_loss_weight)?;
            tape.backward(loss)?;
            model.params.accumulate_grads(&tape, &b)?;
            sgd_step(&mut model.params, lr)?;
            loss_sum += tape.value(loss).item()? * idx.len() as f64;
            correct += count_correct_rows(&tape, fwd.logits, &labels);
        }
        let n = train.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
        log::info!(
            "epoch {epoch} train loss {:.4} acc {:.4}",
            loss_sum / n,
            correct as f64 / n
        );
        if let Some(v) = val {
            let (loss, accuracy, _) = evaluate(model, v, 32)?;
            metrics.push(EpochMetrics {
                epoch,
                split: "val".into(),
                loss,
                accuracy,
            });
            log::info!("epoch {epoch} val loss {loss:.4} acc {accuracy:.4}");
            if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
                break;
            }
        }
    }
    Ok(metrics)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

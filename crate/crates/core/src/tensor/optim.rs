use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

/// Step decay: `lr(epoch) = lr0 * decay^floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64) -> Self {
        Self {
            lr0,
            decay: 0.5,
            every: 10,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Plain gradient descent `p <- p - lr * grad`, then clears the gradients.
/// Every trainable parameter must carry a gradient.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(TensorError::MissingGradient(name.to_string()));
    }
    for (_, p) in params.iter_mut() {
        if let Some(g) = p.grad.take() {
            if p.trainable {
                p.value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(v, d)| *v -= lr * d);
            }
        }
    }
    Ok(())
}

/// Rescales every trainable gradient so that their joint L2 norm is at most
/// `max_norm`. Returns the norm measured before rescaling.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data())
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|d| *d *= k);
            }
        }
    }
    norm
}

//! Helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod artifacts;
pub mod brute;
pub mod grad_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadsafe::dam::{DamConfig, DamModel};
use roadsafe::tensor::Bindings;
use roadsafe::{Result, Tape, Tensor, Var};

/// Relative error with a floor so that two tiny numbers compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Outcome of probing one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    /// Relative error at the nominal step.
    Smooth(f64),
    /// The nominal step failed but the two smaller steps both agree with
    /// the analytic value: a ReLU kink lies inside the nominal interval.
    Kink(f64),
}

/// Compares `analytic` with central differences of `f(delta)` at `eps`.
/// A failure at `eps` is re-probed at `eps/10` and `eps/100` to tell a
/// kink crossing apart from a wrong gradient; the latter keeps its error.
pub fn probe(analytic: f64, f: impl Fn(f64) -> f64, eps: f64, tol: f64) -> Probe {
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let e = rel_err(analytic, central(eps));
    if e < tol {
        return Probe::Smooth(e);
    }
    let fine = [eps / 10.0, eps / 100.0].map(|h| rel_err(analytic, central(h)));
    if fine.iter().all(|&x| x < tol) {
        Probe::Kink(e)
    } else {
        Probe::Smooth(e)
    }
}

/// Worst non-kink error, where it happened, and how many kinks were seen.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub at: String,
    pub kinks: usize,
    pub probed: usize,
}

impl GradReport {
    pub fn record(&mut self, p: Probe, at: impl FnOnce() -> String) {
        self.probed += 1;
        match p {
            Probe::Smooth(e) if e > self.worst => {
                self.worst = e;
                self.at = at();
            }
            Probe::Smooth(_) => {}
            Probe::Kink(_) => self.kinks += 1,
        }
    }

    pub fn merge(&mut self, other: GradReport, label: &str) {
        if other.worst > self.worst {
            self.worst = other.worst;
            self.at = format!("{label}: {}", other.at);
        }
        self.kinks += other.kinks;
        self.probed += other.probed;
    }

    /// Passing means every smooth coordinate is within `tol` and kinks
    /// make up at most one percent of the probes.
    pub fn passes(&self, tol: f64) -> bool {
        self.worst < tol && self.kinks * 100 <= self.probed
    }
}

/// Central-difference check of the gradient of a scalar loss with respect to
/// every parameter of `model`. `loss` builds the loss on a tape from bound
/// parameters. At most `per_param` coordinates of each parameter are probed.
pub fn param_grad_check<F>(
    model: &DamModel,
    loss: F,
    eps: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&DamModel, &mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let out = loss(model, &mut tape, &bindings)?;
    tape.backward(out)?;
    let grads: Vec<(String, Option<Tensor>)> = model
        .params
        .iter()
        .map(|(n, _)| (n.to_string(), bindings.get(n).ok().and_then(|v| tape.grad(v).cloned())))
        .collect();
    let eval = |m: &DamModel| -> f64 {
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let v = loss(m, &mut t, &b).unwrap();
        t.value(v).item().unwrap()
    };
    params_probe(model, &grads, eval, eps, tol, per_param, seed)
}

/// Probes sampled coordinates of every parameter given analytic gradients
/// and a loss evaluator.
pub fn params_probe(
    model: &DamModel,
    grads: &[(String, Option<Tensor>)],
    eval: impl Fn(&DamModel) -> f64,
    eps: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (name, grad) in grads {
        let len = model.params.value(name)?.len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let shifted = |delta: f64| {
                let mut probe = model.clone();
                probe.params.get_mut(name).unwrap().value.data_mut()[i] += delta;
                eval(&probe)
            };
            report.record(probe(analytic, shifted, eps, tol), || format!("{name}[{i}]"));
        }
    }
    Ok(report)
}

/// Cross-entropy of the attention model on a fixed batch.
pub fn dam_ce_loss(images: Tensor, labels: Vec<usize>) -> impl Fn(&DamModel, &mut Tape, &Bindings) -> Result<Var> {
    move |m, tape, b| {
        let x = tape.constant(images.clone());
        let f = m.forward_on_tape(tape, b, x)?;
        let mut loss = tape.softmax_cross_entropy(f.logits, &labels)?;
        for l in &f.local_logits {
            let aux = tape.softmax_cross_entropy(*l, &labels)?;
            let aux = tape.scale(aux, 0.1)?;
            loss = tape.add(loss, aux)?;
        }
        Ok(loss)
    }
}

/// A tiny model plus a random batch that exercises every branch.
///
/// Biases start at zero, which leaves ReLU inputs of all-zero regions
/// sitting exactly on the kink where finite differences are one-sided, so
/// they are redrawn to move the check to a generic point.
pub fn tiny_case(config: DamConfig, seed: u64, n: usize) -> (DamModel, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let (h, w) = config.input_hw;
    let mut model = DamModel::new(config, seed).unwrap();
    for (name, p) in model.params.iter_mut() {
        if name.ends_with(".b") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let images = random_tensor(&mut rng, &[n, 3, h, w]);
    let labels = (0..n).map(|i| i % 2).collect();
    (model, images, labels)
}

//! Finite-difference suites for every tape op and both model losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use roadsafe::da::{da_batch_loss, DaTrainConfig};
use roadsafe::dam::{DamConfig, DamModel, Dataset, SchemeKind, SubregionScheme};
use roadsafe::tensor::Rect;
use roadsafe::{Tape, Tensor, TensorError, Var};

use super::{dam_ce_loss, param_grad_check, params_probe, random_tensor, rel_err, tiny_case, GradReport};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>;

/// Gradient of `f` with respect to its input, by central differences,
/// compared against the tape's backward pass.
pub fn input_check(f: &OpFn, input: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = f(&mut tape, x).unwrap();
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let eval = |t: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x).unwrap();
        tape.value(y).item().unwrap()
    };
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut p = input.clone();
        p.data_mut()[i] += EPS;
        let mut m = input.clone();
        m.data_mut()[i] -= EPS;
        let numeric = (eval(p) - eval(m)) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Reduces any output to a scalar with fixed random weights, so that every
/// output element contributes a distinct amount.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let w = random_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// `(name, input shape, function)` for every op, with constant operands
/// drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape);
    let conv_w = t(&[4, 3, 3, 3]);
    let conv_b = t(&[4]);
    let conv_x = t(&[2, 3, 5, 5]);
    let lin_w = t(&[5, 4]);
    let lin_b = t(&[5]);
    let lin_x = t(&[3, 4]);
    let mat_b = t(&[4, 2]);
    let other = t(&[3, 4]);
    let map_b = t(&[2, 2, 4, 5]);
    let row = t(&[1, 3]);

    macro_rules! case {
        ($name:expr, $shape:expr, |$tape:ident, $x:ident| $body:expr) => {{
            let f: OpFn = Box::new(move |$tape: &mut Tape, $x: Var| {
                let y = $body;
                project($tape, y, seed)
            });
            ($name, $shape.to_vec(), f)
        }};
    }

    let (w1, b1) = (conv_w.clone(), conv_b.clone());
    let (x2, b2) = (conv_x.clone(), conv_b.clone());
    let (x3, w3) = (conv_x.clone(), conv_w.clone());
    let (lw, lb) = (lin_w.clone(), lin_b.clone());
    let (lx, lb2) = (lin_x.clone(), lin_b.clone());
    let (lx3, lw3) = (lin_x.clone(), lin_w.clone());
    let other2 = other.clone();
    let other3 = other.clone();
    let map_b2 = map_b.clone();
    let map_b3 = map_b.clone();
    vec![
        case!("conv2d/input", [2, 3, 5, 5], |tape, x| {
            let (w, b) = (tape.constant(w1.clone()), tape.constant(b1.clone()));
            tape.conv2d(x, w, b, 2, 1)?
        }),
        case!("conv2d/weight", [4, 3, 3, 3], |tape, w| {
            let (x, b) = (tape.constant(x2.clone()), tape.constant(b2.clone()));
            tape.conv2d(x, w, b, 1, 0)?
        }),
        case!("conv2d/bias", [4], |tape, b| {
            let (x, w) = (tape.constant(x3.clone()), tape.constant(w3.clone()));
            tape.conv2d(x, w, b, 2, 1)?
        }),
        case!("linear/input", [3, 4], |tape, x| {
            let (w, b) = (tape.constant(lw.clone()), tape.constant(lb.clone()));
            tape.linear(x, w, b)?
        }),
        case!("linear/weight", [5, 4], |tape, w| {
            let (x, b) = (tape.constant(lx.clone()), tape.constant(lb2.clone()));
            tape.linear(x, w, b)?
        }),
        case!("linear/bias", [5], |tape, b| {
            let (x, w) = (tape.constant(lx3.clone()), tape.constant(lw3.clone()));
            tape.linear(x, w, b)?
        }),
        case!("matmul", [3, 4], |tape, x| {
            let b = tape.constant(mat_b.clone());
            tape.matmul(x, b)?
        }),
        case!("transpose", [3, 4], |tape, x| tape.transpose(x)?),
        case!("add", [3, 4], |tape, x| {
            let o = tape.constant(other.clone());
            tape.add(x, o)?
        }),
        case!("sub", [3, 4], |tape, x| {
            let o = tape.constant(other2.clone());
            let d = tape.sub(o, x)?;
            tape.sub(d, x)?
        }),
        case!("mul", [3, 4], |tape, x| {
            let o = tape.constant(other3.clone());
            let m = tape.mul(x, o)?;
            tape.mul(m, x)?
        }),
        case!("scale", [3, 4], |tape, x| tape.scale(x, -2.5)?),
        case!("relu", [3, 4], |tape, x| tape.relu(x)?),
        case!("sum", [3, 4], |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)?
        }),
        case!("sum_squares", [3, 4], |tape, x| tape.sum_squares(x)?),
        case!("reshape", [3, 4], |tape, x| tape.reshape(x, vec![2, 6])?),
        case!("roi_avg_pool", [2, 2, 4, 5], |tape, x| tape.roi_avg_pool(
            x,
            Rect::new(1, 1, 3, 4),
            2,
            3
        )?),
        case!("roi_avg_pool/upsampling", [2, 2, 4, 5], |tape, x| tape.roi_avg_pool(
            x,
            Rect::new(0, 2, 2, 2),
            3,
            3
        )?),
        case!("adaptive_avg_pool", [2, 2, 4, 5], |tape, x| tape
            .adaptive_avg_pool(x, 2, 2)?),
        case!("channel_concat", [2, 2, 4, 5], |tape, x| {
            let b = tape.constant(map_b.clone());
            tape.channel_concat(&[b, x, x])?
        }),
        case!("channel_slice", [2, 2, 4, 5], |tape, x| tape.channel_slice(x, 1, 1)?),
        case!("gather_batch", [2, 2, 4, 5], |tape, x| {
            let b = tape.constant(map_b2.clone());
            let xx = tape.scale(x, 3.0)?;
            tape.gather_batch(&[b, x, xx], &[1, 2])?
        }),
        case!("select_rows", [3, 4], |tape, x| tape.select_rows(x, &[2, 0, 2])?),
        case!("softmax_cross_entropy", [3, 4], |tape, x| tape
            .softmax_cross_entropy(x, &[0, 3, 1])?),
        case!("gram", [3, 4], |tape, x| tape.gram(x)?),
        case!("column_sum", [3, 4], |tape, x| tape.column_sum(x)?),
        case!("outer", [1, 4], |tape, x| {
            let r = tape.constant(row.clone());
            let a = tape.outer(x, r)?;
            let b = tape.outer(x, x)?;
            let bt = tape.transpose(b)?;
            let s = tape.sum(a)?;
            let s2 = tape.mul(bt, bt)?;
            let s2 = tape.sum(s2)?;
            tape.add(s, s2)?
        }),
        case!("symmetrize", [4, 4], |tape, x| tape.symmetrize(x)?),
        case!("l2_normalize_rows", [3, 4], |tape, x| tape.l2_normalize_rows(x)?),
        case!("rms_normalize", [3, 4], |tape, x| tape.rms_normalize(x)?),
        case!("composite/conv_relu_pool", [2, 2, 4, 5], |tape, x| {
            let b = tape.constant(map_b3.clone());
            let c = tape.channel_concat(&[x, b])?;
            let r = tape.relu(c)?;
            tape.adaptive_avg_pool(r, 1, 1)?
        }),
    ]
}

/// Worst relative error over all op cases for one seed.
pub fn worst_op_error(seed: u64) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    let mut worst = (0.0, "");
    for (name, shape, f) in op_cases(seed) {
        let input = random_tensor(&mut rng, &shape);
        let e = input_check(&f, &input);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

pub fn scheme_configs() -> Vec<(&'static str, DamConfig)> {
    let hw = (16, 16);
    vec![
        ("HS", DamConfig::tiny(hw, vec![SubregionScheme::new(SchemeKind::HS, 2)])),
        ("VS", DamConfig::tiny(hw, vec![SubregionScheme::new(SchemeKind::VS, 2)])),
        ("SQ", DamConfig::tiny(hw, vec![SubregionScheme::new(SchemeKind::SQ, 4)])),
        (
            "HS+VS+SQ",
            DamConfig::tiny(
                hw,
                vec![
                    SubregionScheme::new(SchemeKind::HS, 2),
                    SubregionScheme::new(SchemeKind::VS, 2),
                    SubregionScheme::new(SchemeKind::SQ, 4),
                ],
            ),
        ),
    ]
}

/// Parameter-gradient report of the attention model under each scheme.
pub fn dam_report(seed: u64) -> GradReport {
    let mut report = GradReport::default();
    for (name, cfg) in scheme_configs() {
        let (model, images, labels) = tiny_case(cfg, seed, 3);
        let r = param_grad_check(&model, dam_ce_loss(images, labels), EPS, TOL, 24, seed).unwrap();
        report.merge(r, name);
    }
    report
}

/// Parameter-gradient report of the adaptation-mode model under the joint
/// classification plus alignment loss.
pub fn da_report(seed: u64) -> GradReport {
    let mut cfg = scheme_configs().pop().unwrap().1;
    cfg.da_mode = true;
    let (model, images, _) = tiny_case(cfg, seed, 8);
    let mut source = Dataset::default();
    let mut target = Dataset::default();
    for i in 0..8 {
        let img = images.index0(i).unwrap();
        if i < 4 {
            source.push(format!("s{i}"), img, i % 2);
        } else {
            target.push(format!("t{i}"), img, (i / 2) % 2);
        }
    }
    let cfg = DaTrainConfig {
        lambda: 2.0,
        ..Default::default()
    };
    let idx = [0, 1, 2, 3];
    // da_batch_loss builds its own tape, so gradients are read off it here
    let batch = da_batch_loss(&model, &source, &target, &idx, &idx, &cfg).unwrap();
    let mut tape = batch.tape;
    tape.backward(batch.total).unwrap();
    let grads: Vec<_> = batch
        .bindings
        .iter()
        .map(|(n, v)| (n.to_string(), tape.grad(v).cloned()))
        .collect();
    let eval = |m: &DamModel| {
        let b = da_batch_loss(m, &source, &target, &idx, &idx, &cfg).unwrap();
        b.tape.value(b.total).item().unwrap()
    };
    params_probe(&model, &grads, eval, EPS, TOL, 12, seed).unwrap()
}

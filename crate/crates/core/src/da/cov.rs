//! Class-conditional scatter matrices and the two alignment losses.
//!
//! Both scatter matrices are computed from first and second moments instead
//! of the quadratic pairwise sums they are defined by:
//!
//! `sum_{i,j} (a_i - a_j)(a_i - a_j)^T = 2n A^T A - 2 s s^T` with `s = 1^T A`
//!
//! `sum_{i,j} (x_i - y_j)(x_i - y_j)^T = n_y X^T X + n_x Y^T Y - s_x s_y^T - s_y s_x^T`
//!
//! The `j = i` terms of the within sum vanish, so including them is exact.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Feature rows of one domain split by class. `x` holds the samples
/// labeled dangerous and `y` those labeled safe; either may be absent.
#[derive(Clone, Copy, Debug)]
pub struct ClassFeatures {
    pub x: Option<Var>,
    pub y: Option<Var>,
    pub d: usize,
}

fn rows(tape: &Tape, v: Option<Var>) -> usize {
    v.map_or(0, |v| tape.shape(v)[0])
}

fn zeros(tape: &mut Tape, d: usize) -> Var {
    tape.constant(Tensor::zeros(&[d, d]))
}

fn check_dim(tape: &Tape, v: Option<Var>, d: usize) -> Result<()> {
    if let Some(v) = v {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != d {
            return Err(Error::Data(format!("feature block {s:?} does not have width {d}")));
        }
    }
    Ok(())
}

/// `sum_{i,j} (a_i - a_j)(a_i - a_j)^T` for one class; zero below 2 rows.
fn class_scatter(tape: &mut Tape, a: Option<Var>, d: usize) -> Result<Var> {
    let n = rows(tape, a);
    let Some(a) = a.filter(|_| n >= 2) else {
        return Ok(zeros(tape, d));
    };
    let g = tape.gram(a)?;
    let g = tape.scale(g, 2.0 * n as f64)?;
    let s = tape.column_sum(a)?;
    let ss = tape.outer(s, s)?;
    let ss = tape.scale(ss, 2.0)?;
    let m = tape.sub(g, ss)?;
    Ok(tape.symmetrize(m)?)
}

/// Within-class scatter: the sum of both classes' pairwise scatter.
pub fn cov_within(tape: &mut Tape, f: ClassFeatures) -> Result<Var> {
    check_dim(tape, f.x, f.d)?;
    check_dim(tape, f.y, f.d)?;
    let sx = class_scatter(tape, f.x, f.d)?;
    let sy = class_scatter(tape, f.y, f.d)?;
    Ok(tape.add(sx, sy)?)
}

/// Between-class scatter over all cross-class pairs; zero when a class is
/// missing.
pub fn cov_between(tape: &mut Tape, f: ClassFeatures) -> Result<Var> {
    check_dim(tape, f.x, f.d)?;
    check_dim(tape, f.y, f.d)?;
    let (nx, ny) = (rows(tape, f.x), rows(tape, f.y));
    let (Some(x), Some(y)) = (f.x.filter(|_| nx > 0), f.y.filter(|_| ny > 0)) else {
        return Ok(zeros(tape, f.d));
    };
    let gx = tape.gram(x)?;
    let gx = tape.scale(gx, ny as f64)?;
    let gy = tape.gram(y)?;
    let gy = tape.scale(gy, nx as f64)?;
    let sx = tape.column_sum(x)?;
    let sy = tape.column_sum(y)?;
    let xy = tape.outer(sx, sy)?;
    let yx = tape.outer(sy, sx)?;
    let m = tape.add(gx, gy)?;
    let m = tape.sub(m, xy)?;
    let m = tape.sub(m, yx)?;
    Ok(tape.symmetrize(m)?)
}

/// `||S_W - T_W||_F^2 + ||S_B - T_B||_F^2`.
pub fn loss_da(tape: &mut Tape, source: ClassFeatures, target: ClassFeatures) -> Result<Var> {
    if source.d != target.d {
        return Err(Error::Data(format!(
            "source width {} differs from target width {}",
            source.d, target.d
        )));
    }
    let sw = cov_within(tape, source)?;
    let tw = cov_within(tape, target)?;
    let sb = cov_between(tape, source)?;
    let tb = cov_between(tape, target)?;
    let dw = tape.sub(sw, tw)?;
    let db = tape.sub(sb, tb)?;
    let lw = tape.sum_squares(dw)?;
    let lb = tape.sum_squares(db)?;
    Ok(tape.add(lw, lb)?)
}

/// Unbiased feature covariance of `a [n, d]`, `n >= 2`.
fn covariance(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    if n < 2 {
        return Err(Error::Data(format!("covariance needs at least 2 samples, got {n}")));
    }
    let g = tape.gram(a)?;
    let s = tape.column_sum(a)?;
    let ss = tape.outer(s, s)?;
    let ss = tape.scale(ss, 1.0 / n as f64)?;
    let c = tape.sub(g, ss)?;
    let c = tape.scale(c, 1.0 / (n - 1) as f64)?;
    Ok(tape.symmetrize(c)?)
}

/// Class-agnostic baseline `(1/d) ||C_S - C_T||_F^2`.
pub fn loss_coral(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    let d = tape.shape(source)[1];
    if tape.shape(target).get(1) != Some(&d) {
        return Err(Error::Data("source and target feature widths differ".into()));
    }
    let cs = covariance(tape, source)?;
    let ct = covariance(tape, target)?;
    let diff = tape.sub(cs, ct)?;
    let sq = tape.sum_squares(diff)?;
    Ok(tape.scale(sq, 1.0 / d as f64)?)
}

/// Feature lists of one domain, dangerous (`x`) and safe (`y`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBatch {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl FeatureBatch {
    fn dim(&self) -> Result<usize> {
        let d = self
            .x
            .iter()
            .chain(&self.y)
            .map(|v| v.len())
            .next()
            .ok_or_else(|| Error::Data("feature batch has no samples".into()))?;
        if self.x.iter().chain(&self.y).any(|v| v.len() != d) {
            return Err(Error::Data("feature vectors differ in length".into()));
        }
        Ok(d)
    }

    fn on_tape(&self, tape: &mut Tape, d: usize) -> Result<ClassFeatures> {
        let mut block = |rows: &[Vec<f64>]| -> Result<Option<Var>> {
            if rows.is_empty() {
                return Ok(None);
            }
            let t = Tensor::new(vec![rows.len(), d], rows.concat())?;
            Ok(Some(tape.constant(t)))
        };
        Ok(ClassFeatures {
            x: block(&self.x)?,
            y: block(&self.y)?,
            d,
        })
    }
}

/// Plain-value version of [`cov_within`].
pub fn cov_within_matrix(batch: &FeatureBatch) -> Result<Tensor> {
    let d = batch.dim()?;
    let mut tape = Tape::new();
    let f = batch.on_tape(&mut tape, d)?;
    let v = cov_within(&mut tape, f)?;
    Ok(tape.value(v).clone())
}

/// Plain-value version of [`cov_between`].
pub fn cov_between_matrix(batch: &FeatureBatch) -> Result<Tensor> {
    let d = batch.dim()?;
    let mut tape = Tape::new();
    let f = batch.on_tape(&mut tape, d)?;
    let v = cov_between(&mut tape, f)?;
    Ok(tape.value(v).clone())
}

/// Plain-value version of [`loss_da`].
pub fn loss_da_value(source: &FeatureBatch, target: &FeatureBatch) -> Result<f64> {
    let d = source.dim()?;
    let mut tape = Tape::new();
    let s = source.on_tape(&mut tape, d)?;
    let t = target.on_tape(&mut tape, d)?;
    let v = loss_da(&mut tape, s, t)?;
    Ok(tape.value(v).item()?)
}

/// Plain-value version of [`loss_coral`].
pub fn loss_coral_value(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    let d = source.first().map_or(0, |v| v.len());
    let mut tape = Tape::new();
    let to_var = |tape: &mut Tape, rows: &[Vec<f64>]| -> Result<Var> {
        Ok(tape.constant(Tensor::new(vec![rows.len(), d], rows.concat())?))
    };
    let s = to_var(&mut tape, source)?;
    let t = to_var(&mut tape, target)?;
    let v = loss_coral(&mut tape, s, t)?;
    Ok(tape.value(v).item()?)
}

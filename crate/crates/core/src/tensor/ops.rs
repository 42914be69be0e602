//! Differentiable primitives. Each op has a forward method on [`Tape`] and a
//! matching arm in [`backward_node`].

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::tape::{accumulate, Tape, Var};
use super::{shape_err, Result, Tensor, TensorError};

/// Axis-aligned rectangle in feature-map coordinates: rows `[y, y+h)`,
/// columns `[x, x+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(y: usize, x: usize, h: usize, w: usize) -> Self {
        Self { y, x, h, w }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { y: 0, x: 0, h, w }
    }
}

/// Bin `i` of `out` over a length-`len` axis covers
/// `[floor(i*len/out), floor((i+1)*len/out))`, widened to one element when
/// `len < out` would leave it empty.
pub(crate) fn bin_bounds(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len / out).max(start + 1);
    (start, end.min(len))
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Relu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    RoiPool {
        input: Var,
        rect: Rect,
        out_h: usize,
        out_w: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    GatherBatch {
        inputs: Vec<Var>,
        choice: Vec<usize>,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gram {
        a: Var,
    },
    ColumnSum {
        a: Var,
    },
    Outer {
        a: Var,
        b: Var,
    },
    Symmetrize {
        a: Var,
    },
    RmsNormalize {
        a: Var,
        rms: f64,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input, weight, bias, ..
            }
            | Linear { input, weight, bias } => vec![*input, *weight, *bias],
            MatMul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } | Outer { a, b } => {
                vec![*a, *b]
            }
            Transpose { a }
            | Scale { a, .. }
            | Relu { a }
            | Sum { a }
            | Reshape { a }
            | SelectRows { a, .. }
            | Gram { a }
            | ColumnSum { a }
            | Symmetrize { a }
            | L2NormalizeRows { a, .. }
            | RmsNormalize { a, .. } => vec![*a],
            RoiPool { input, .. } | SliceChannels { input, .. } => vec![*input],
            SoftmaxCe { logits, .. } => vec![*logits],
            Concat { inputs } | GatherBatch { inputs, .. } => inputs.clone(),
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (co, ci, kh, kw) = w.dims4("conv2d")?;
    if c != ci {
        return shape_err(
            "conv2d",
            format!("input channels {c} do not match weight in-channels {ci}"),
        );
    }
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad {
        return shape_err(
            "conv2d",
            format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
        );
    }
    if kw > wd + 2 * pad {
        return shape_err(
            "conv2d",
            format!("kernel width {kw} exceeds padded input width {}", wd + 2 * pad),
        );
    }
    let geom = ConvGeom {
        c,
        h,
        w: wd,
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    };
    Ok((n, co, geom))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    /// 2-D cross-correlation, `weight` is `[out_channels, in_channels, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, co, g) = conv_geom(x, w, stride, pad)?;
        if b.shape() != [co] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{co}]", b.shape()));
        }
        let (k, p) = (g.k(), g.p());
        let in_stride = g.c * g.h * g.w;
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; k * p];
        for s in 0..n {
            g.im2col(&x.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
            let dst = &mut out[s * co * p..(s + 1) * co * p];
            gemm(MatRef::new(w.data(), co, k), MatRef::new(&cols, k, p), 0.0, dst);
            for (o, row) in dst.chunks_mut(p).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
        let value = Tensor::new(vec![n, co, g.ho, g.wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// `input [N,F] x weight[O,F]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, f) = x.dims2("linear")?;
        let (o, f2) = w.dims2("linear")?;
        if f != f2 {
            return shape_err("linear", format!("input features {f} vs weight features {f2}"));
        }
        if b.shape() != [o] {
            return shape_err("linear", format!("bias shape {:?}, expected [{o}]", b.shape()));
        }
        let mut out = vec![0.0; n * o];
        gemm(
            MatRef::new(x.data(), n, f),
            MatRef::new(w.data(), o, f).t(),
            0.0,
            &mut out,
        );
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
        let value = Tensor::new(vec![n, o], out)?;
        self.push("linear", value, Op::Linear { input, weight, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose { a })
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        self.push("scale", v, Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())?;
        self.push("relu", v, Op::Relu { a })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a })
    }

    /// Squared Frobenius norm, `sum(a * a)`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape { a })
    }

    /// Averages `rect` of every `[N,C,H,W]` map into an `out_h x out_w` grid.
    pub fn roi_avg_pool(&mut self, input: Var, rect: Rect, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("roi_avg_pool")?;
        if rect.h == 0 || rect.w == 0 {
            return Err(TensorError::EmptyRegion(rect));
        }
        if rect.y + rect.h > h || rect.x + rect.w > w {
            return shape_err("roi_avg_pool", format!("region {rect:?} exceeds feature map {h}x{w}"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid("roi_avg_pool output size must be >= 1".into()));
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        let src = x.data();
        for (plane, dst) in out.chunks_mut(out_h * out_w).enumerate() {
            let base = plane * h * w;
            for oy in 0..out_h {
                let (y0, y1) = bin_bounds(oy, rect.h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin_bounds(ox, rect.w, out_w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        let row = base + (rect.y + yy) * w + rect.x;
                        acc += src[row + x0..row + x1].iter().sum::<f64>();
                    }
                    dst[oy * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        self.push(
            "roi_avg_pool",
            value,
            Op::RoiPool {
                input,
                rect,
                out_h,
                out_w,
            },
        )
    }

    /// Adaptive average pooling of the full spatial extent.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4("adaptive_avg_pool")?;
        self.roi_avg_pool(input, Rect::full(h, w), out_h, out_w)
    }

    /// Concatenates `[N,Ci,H,W]` maps along the channel axis.
    pub fn channel_concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("channel_concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4("channel_concat")?;
        let mut total_c = 0;
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).dims4("channel_concat")?;
            if n2 != n {
                return shape_err("channel_concat", format!("batch extent {n2} vs {n}"));
            }
            if h2 != h {
                return shape_err("channel_concat", format!("height {h2} vs {h}"));
            }
            if w2 != w {
                return shape_err("channel_concat", format!("width {w2} vs {w}"));
            }
            total_c += c2;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push(
            "channel_concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Channels `[start, start+len)` of a `[N,C,H,W]` map.
    pub fn channel_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        let (n, c, h, w) = t.dims4("channel_slice")?;
        if start + len > c {
            return shape_err(
                "channel_slice",
                format!("channels [{start}, {}) exceed {c}", start + len),
            );
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            out.extend_from_slice(&t.data()[base..base + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        self.push("channel_slice", value, Op::SliceChannels { input, start })
    }

    /// Sample `i` of the output is sample `i` of `inputs[choice[i]]`.
    pub fn gather_batch(&mut self, inputs: &[Var], choice: &[usize]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("gather_batch of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        let n = *shape.first().unwrap_or(&0);
        if choice.len() != n {
            return shape_err("gather_batch", format!("{} choices for batch {n}", choice.len()));
        }
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return shape_err("gather_batch", format!("{:?} vs {:?}", self.shape(v), shape));
            }
        }
        let stride: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(n * stride);
        for (s, &c) in choice.iter().enumerate() {
            let src = inputs
                .get(c)
                .ok_or_else(|| TensorError::Invalid(format!("choice {c} out of range")))?;
            out.extend_from_slice(&self.value(*src).data()[s * stride..(s + 1) * stride]);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "gather_batch",
            value,
            Op::GatherBatch {
                inputs: inputs.to_vec(),
                choice: choice.to_vec(),
            },
        )
    }

    /// Rows `rows` of a 2-D tensor, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("select_rows")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return shape_err("select_rows", format!("row {i} out of range {r}"));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        self.push("select_rows", value, Op::SelectRows { a, rows: rows.to_vec() })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = t.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return shape_err(
                "softmax_cross_entropy",
                format!("{} labels for batch {n}", labels.len()),
            );
        }
        if n == 0 {
            return Err(TensorError::Invalid("softmax_cross_entropy of an empty batch".into()));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            let label = labels[i];
            if label >= k {
                return Err(TensorError::LabelOutOfRange { label, classes: k });
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|z| (z - m).exp()).sum();
            for (p, z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (z - m).exp() / denom;
            }
            loss += (denom.ln() - (row[label] - m)).max(0.0);
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `a^T a` for `a [n,d]`; exactly symmetric.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = t.dims2("gram")?;
        let x = t.data();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for r in 0..n {
                    s += x[r * d + i] * x[r * d + j];
                }
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        self.push("gram", Tensor::new(vec![d, d], out)?, Op::Gram { a })
    }

    /// Column sums of `a [n,d]` as a `[1,d]` row.
    pub fn column_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, d) = t.dims2("column_sum")?;
        let mut out = vec![0.0; d];
        for row in t.data().chunks(d.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push("column_sum", Tensor::new(vec![1, d], out)?, Op::ColumnSum { a })
    }

    /// Outer product `a^T b` of two row vectors `[1,m]`, `[1,n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, m) = self.value(a).dims2("outer")?;
        let (rb, n) = self.value(b).dims2("outer")?;
        if ra != 1 || rb != 1 {
            return shape_err("outer", "operands must be [1, d] rows");
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x[i] * y[j];
            }
        }
        self.push("outer", Tensor::new(vec![m, n], out)?, Op::Outer { a, b })
    }

    /// `(a + a^T) / 2`, exactly symmetric.
    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("symmetrize")?;
        if r != c {
            return shape_err("symmetrize", format!("matrix is {r}x{c}"));
        }
        let x = t.data();
        let mut out = vec![0.0; r * r];
        for i in 0..r {
            for j in i..r {
                let v = 0.5 * (x[i * r + j] + x[j * r + i]);
                out[i * r + j] = v;
                out[j * r + i] = v;
            }
        }
        self.push("symmetrize", Tensor::new(vec![r, r], out)?, Op::Symmetrize { a })
    }

    /// Scales each row of `a [n,d]` to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, d) = t.dims2("l2_normalize_rows")?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d.max(1)) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { a, norms })
    }

    /// Divides `a [n,d]` by its root-mean-square row norm
    /// `sqrt(sum(a^2) / n)`, one scale shared by the whole batch.
    pub fn rms_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, _) = t.dims2("rms_normalize")?;
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64 + 1e-12).sqrt();
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v / rms).collect())?;
        self.push("rms_normalize", value, Op::RmsNormalize { a, rms })
    }
}

/// Applies node `i`'s backward rule given its output gradient `g`.
pub(crate) fn backward_node(tape: &Tape, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &tape.nodes[i];
    let needs = |v: Var| tape.nodes[v.0].requires_grad;
    let val = |v: Var| &tape.nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (n, co, geom) = conv_geom(x, w, *stride, *pad)?;
            let (k, p) = (geom.k(), geom.p());
            let in_stride = geom.c * geom.h * geom.w;
            if needs(*bias) {
                let mut db = vec![0.0; co];
                for s in 0..n {
                    for (o, row) in g[s * co * p..(s + 1) * co * p].chunks(p).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                accumulate(grads, *bias, db);
            }
            let want_w = needs(*weight);
            let want_x = needs(*input);
            let mut dw = vec![0.0; if want_w { co * k } else { 0 }];
            let mut dx = vec![0.0; if want_x { x.len() } else { 0 }];
            let mut cols = vec![0.0; k * p];
            for s in 0..n {
                let gs = &g[s * co * p..(s + 1) * co * p];
                if want_w {
                    geom.im2col(&x.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
                    gemm(MatRef::new(gs, co, p), MatRef::new(&cols, k, p).t(), 1.0, &mut dw);
                }
                if want_x {
                    gemm(MatRef::new(w.data(), co, k).t(), MatRef::new(gs, co, p), 0.0, &mut cols);
                    geom.col2im(&cols, &mut dx[s * in_stride..(s + 1) * in_stride]);
                }
            }
            if want_w {
                accumulate(grads, *weight, dw);
            }
            if want_x {
                accumulate(grads, *input, dx);
            }
        }
        Op::Linear { input, weight, bias } => {
            let (x, w) = (val(*input), val(*weight));
            let (n, f) = x.dims2("linear")?;
            let (o, _) = w.dims2("linear")?;
            if needs(*input) {
                let mut dx = vec![0.0; n * f];
                gemm(MatRef::new(g, n, o), MatRef::new(w.data(), o, f), 0.0, &mut dx);
                accumulate(grads, *input, dx);
            }
            if needs(*weight) {
                let mut dw = vec![0.0; o * f];
                gemm(MatRef::new(g, n, o).t(), MatRef::new(x.data(), n, f), 0.0, &mut dw);
                accumulate(grads, *weight, dw);
            }
            if needs(*bias) {
                let mut db = vec![0.0; o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *bias, db);
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = val(*a).dims2("matmul")?;
            let (_, n) = val(*b).dims2("matmul")?;
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                gemm(
                    MatRef::new(g, m, n),
                    MatRef::new(val(*b).data(), k, n).t(),
                    0.0,
                    &mut da,
                );
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                gemm(
                    MatRef::new(val(*a).data(), m, k).t(),
                    MatRef::new(g, m, n),
                    0.0,
                    &mut db,
                );
                accumulate(grads, *b, db);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = val(*a).dims2("transpose")?;
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j * r + i];
                }
            }
            accumulate(grads, *a, da);
        }
        Op::Add { a, b } => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                accumulate(grads, *a, g.iter().zip(tb).map(|(d, y)| d * y).collect());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().zip(ta).map(|(d, x)| d * x).collect());
            }
        }
        Op::Scale { a, s } => accumulate(grads, *a, g.iter().map(|d| d * s).collect()),
        Op::Relu { a } => {
            let x = val(*a).data();
            let da = g.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
            accumulate(grads, *a, da);
        }
        Op::Sum { a } => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
        Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
        Op::RoiPool {
            input,
            rect,
            out_h,
            out_w,
        } => {
            let (_, _, h, w) = val(*input).dims4("roi_avg_pool")?;
            let mut dx = vec![0.0; val(*input).len()];
            for (plane, gp) in g.chunks(out_h * out_w).enumerate() {
                let base = plane * h * w;
                for oy in 0..*out_h {
                    let (y0, y1) = bin_bounds(oy, rect.h, *out_h);
                    for ox in 0..*out_w {
                        let (x0, x1) = bin_bounds(ox, rect.w, *out_w);
                        let share = gp[oy * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                        for yy in y0..y1 {
                            let row = base + (rect.y + yy) * w + rect.x;
                            dx[row + x0..row + x1].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
            }
            accumulate(grads, *input, dx);
        }
        Op::Concat { inputs } => {
            let (n, total_c, h, w) = node.value.dims4("channel_concat")?;
            let plane = h * w;
            let mut offset = 0;
            for &v in inputs {
                let c = val(v).shape()[1];
                if needs(v) {
                    let mut dv = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        let base = (s * total_c + offset) * plane;
                        dv.extend_from_slice(&g[base..base + c * plane]);
                    }
                    accumulate(grads, v, dv);
                }
                offset += c;
            }
        }
        Op::SliceChannels { input, start } => {
            let (n, c, h, w) = val(*input).dims4("channel_slice")?;
            let len = node.value.shape()[1];
            let plane = h * w;
            let mut dx = vec![0.0; n * c * plane];
            for s in 0..n {
                let base = (s * c + start) * plane;
                dx[base..base + len * plane].copy_from_slice(&g[s * len * plane..(s + 1) * len * plane]);
            }
            accumulate(grads, *input, dx);
        }
        Op::GatherBatch { inputs, choice } => {
            let n = choice.len();
            let stride = if n == 0 { 0 } else { g.len() / n };
            for (idx, &v) in inputs.iter().enumerate() {
                if !needs(v) || !choice.contains(&idx) {
                    continue;
                }
                let mut dv = vec![0.0; g.len()];
                for (s, &c) in choice.iter().enumerate() {
                    if c == idx {
                        dv[s * stride..(s + 1) * stride].copy_from_slice(&g[s * stride..(s + 1) * stride]);
                    }
                }
                accumulate(grads, v, dv);
            }
        }
        Op::SelectRows { a, rows } => {
            let (r, c) = val(*a).dims2("select_rows")?;
            let mut da = vec![0.0; r * c];
            for (k, &row) in rows.iter().enumerate() {
                da[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(&g[k * c..(k + 1) * c])
                    .for_each(|(d, v)| *d += v);
            }
            accumulate(grads, *a, da);
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / n as f64;
            let mut dl = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                dl[i * k + label] -= 1.0;
            }
            dl.iter_mut().for_each(|v| *v *= scale);
            accumulate(grads, *logits, dl);
        }
        Op::Gram { a } => {
            let t = val(*a);
            let (n, d) = t.dims2("gram")?;
            let x = t.data();
            // dA = A (G + G^T)
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = g[i * d + j] + g[j * d + i];
                }
            }
            let mut da = vec![0.0; n * d];
            gemm(MatRef::new(x, n, d), MatRef::new(&sym, d, d), 0.0, &mut da);
            accumulate(grads, *a, da);
        }
        Op::ColumnSum { a } => {
            let (n, _) = val(*a).dims2("column_sum")?;
            let mut da = Vec::with_capacity(n * g.len());
            for _ in 0..n {
                da.extend_from_slice(g);
            }
            accumulate(grads, *a, da);
        }
        Op::Outer { a, b } => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let (m, n) = (x.len(), y.len());
            if needs(*a) {
                let da = (0..m).map(|i| (0..n).map(|j| g[i * n + j] * y[j]).sum()).collect();
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                let db = (0..n).map(|j| (0..m).map(|i| g[i * n + j] * x[i]).sum()).collect();
                accumulate(grads, *b, db);
            }
        }
        Op::Symmetrize { a } => {
            let (r, _) = val(*a).dims2("symmetrize")?;
            let mut da = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..r {
                    da[i * r + j] = 0.5 * (g[i * r + j] + g[j * r + i]);
                }
            }
            accumulate(grads, *a, da);
        }
        Op::L2NormalizeRows { a, norms } => {
            let (_, d) = val(*a).dims2("l2_normalize_rows")?;
            let y = node.value.data();
            let mut da = vec![0.0; y.len()];
            for (r, norm) in norms.iter().enumerate() {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    da[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                }
            }
            accumulate(grads, *a, da);
        }
        Op::RmsNormalize { a, rms } => {
            // y = a / s with s^2 = sum(a^2)/n, so
            // da = g/s - y (g . y) / (n s)
            let (n, _) = val(*a).dims2("rms_normalize")?;
            let y = node.value.data();
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            let k = dot / n as f64;
            let da = y.iter().zip(g).map(|(yv, gv)| (gv - yv * k) / rms).collect();
            accumulate(grads, *a, da);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &t(&[1, 1, 1, 1], &[9.0]));
    }

    #[test]
    fn conv_identity_kernel_and_diagonal_kernel() {
        let mut tape = Tape::new();
        let input = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = tape.constant(input.clone());
        let w1 = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w1, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &input);
        let wd = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y2 = tape.conv2d(x, wd, b, 1, 0).unwrap();
        assert_eq!(tape.value(y2).data(), &[5.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 9, 7]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 2]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        // floor((9+2-3)/2)+1 = 5, floor((7+2-2)/2)+1 = 4
        assert_eq!(tape.shape(y), &[2, 4, 5, 4]);
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let w = tape.constant(Tensor::zeros(&[1, 2, 7, 3]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.conv2d(x, w, b, 0, 0).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);

        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.5, 4.0]);

        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.linear(x, zw, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(tape.linear(x, bad, bias).is_err());
    }

    #[test]
    fn relu_pool_concat_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let m = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.adaptive_avg_pool(m, 1, 1).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);

        let a = tape.constant(Tensor::zeros(&[1, 3, 7, 7]));
        let b = tape.constant(Tensor::zeros(&[1, 5, 7, 7]));
        let c = tape.channel_concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 8, 7, 7]);
        let d = tape.constant(Tensor::zeros(&[1, 5, 6, 7]));
        let err = tape.channel_concat(&[a, d]).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn roi_pool_examples() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let m = tape.constant(t(&[1, 1, 4, 4], &data));
        let same = tape.roi_avg_pool(m, Rect::full(4, 4), 4, 4).unwrap();
        assert_eq!(tape.value(same).data(), &data[..]);
        let q = tape.roi_avg_pool(m, Rect::full(4, 4), 2, 2).unwrap();
        // quadrants: {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
        assert_eq!(tape.value(q).data(), &[2.5, 4.5, 10.5, 12.5]);

        let r = tape.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let one = tape.roi_avg_pool(r, Rect::full(2, 2), 1, 1).unwrap();
        assert_eq!(tape.value(one).data(), &[4.0]);

        assert!(matches!(
            tape.roi_avg_pool(m, Rect::new(0, 0, 0, 2), 1, 1),
            Err(TensorError::EmptyRegion(_))
        ));
        assert!(tape.roi_avg_pool(m, Rect::new(3, 0, 2, 2), 1, 1).is_err());
    }

    #[test]
    fn roi_bins_widen_when_upsampling() {
        for len in 1..10 {
            for out in 1..10 {
                let mut covered = vec![false; len];
                for i in 0..out {
                    let (s, e) = bin_bounds(i, len, out);
                    assert!(s < e && e <= len);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|c| *c));
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.3, 0.3]));
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.constant(t(&[1, 2], &[50.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-20);

        let z = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let l = tape.sum_squares(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let c = tape.mul(b, x).unwrap(); // 3x^2
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[18.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1e308]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn gather_batch_picks_per_sample() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2, 1], &[10.0, 20.0]), true);
        let g = tape.gather_batch(&[a, b], &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[10.0, 2.0]);
        let l = tape.sum(g).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 0.0]);
    }
}

use std::path::Path;

use crate::dam::DamModel;
use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::tensor::Tensor;

/// A class activation map at input resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// The raw map was constant, so `values` is all zeros.
    pub constant: bool,
}

impl CamMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixel `(x, y)` of the maximum (first in row-major order on ties).
    pub fn peak(&self) -> (usize, usize) {
        let i = crate::dam::argmax(&self.values);
        (i % self.width, i / self.width)
    }

    pub fn to_gray(&self) -> GrayImage {
        let mut g = GrayImage::new(self.width, self.height);
        for (dst, v) in g.data.iter_mut().zip(&self.values) {
            *dst = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        g
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().write_pgm(path)
    }
}

/// Per-channel weights of `class` through the two linear maps after global
/// pooling: `head.w[class] * fc.w`.
pub fn cam_weights(model: &DamModel, class: usize) -> Result<Vec<f64>> {
    let head = model.params.value("head.w")?;
    let fc = model.params.value("fc.w")?;
    let (k, d) = (head.shape()[0], head.shape()[1]);
    let c = fc.shape()[1];
    if class >= k {
        return Err(Error::Data(format!("class {class} out of range for {k} classes")));
    }
    let mut w = vec![0.0; c];
    for j in 0..d {
        let h = head.data()[class * d + j];
        for (wi, f) in w.iter_mut().zip(&fc.data()[j * c..(j + 1) * c]) {
            *wi += h * f;
        }
    }
    Ok(w)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Class activation map of one `[3, H, W]` image for `class`. The raw map
/// is resized to the input size and then min-max normalized, so a
/// non-constant map spans exactly `[0, 1]`.
pub fn cam(model: &DamModel, image: &Tensor, class: usize) -> Result<CamMap> {
    let weights = cam_weights(model, class)?;
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let trace = model.forward(&batch)?.remove(0);
    let fmap = &trace.final_map;
    let (c, h, w) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let mut raw = vec![0.0; h * w];
    for (ch, wt) in weights.iter().enumerate().take(c) {
        for (r, v) in raw.iter_mut().zip(&fmap.data()[ch * h * w..(ch + 1) * h * w]) {
            *r += wt * v;
        }
    }
    let (height, width) = model.config.input_hw;
    let mut values = bilinear_resize(&raw, h, w, height, width);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let constant = !(hi > lo);
    if constant {
        values.fill(0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    Ok(CamMap {
        height,
        width,
        values,
        constant,
    })
}

//! Synthetic overhead-imagery stand-in.
//!
//! Dangerous images contain an intersection motif: a horizontal and a
//! vertical high-contrast strip crossing at a common centre. Safe images
//! contain a single strip or none. Both carry low-contrast clutter and pixel
//! noise, and every motif is translated by a uniform offset in
//! `[-jitter_px, jitter_px]^2` to model misregistered imagery.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_splits, DatasetManifest, Domain, Label, ManifestEntry, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;

pub const SYNTH_VERSION: &str = concat!("roadsafe-synth ", env!("CARGO_PKG_VERSION"));

/// Nominal strip colour before the domain transform.
pub const STRIP_RGB: [f64; 3] = [215.0, 215.0, 205.0];
/// Channel level separating strips from everything else, pre-transform.
pub const STRIP_THRESHOLD: f64 = 177.0;

/// Per-channel affine palette transform applied after drawing:
/// `out[c] = gain[c] * in[order[c]] + offset[c]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub order: [usize; 3],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl DomainStyle {
    pub fn source() -> Self {
        Self {
            order: [0, 1, 2],
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    /// Rotated channels, compressed contrast and a brightness lift.
    pub fn target() -> Self {
        Self {
            order: [2, 0, 1],
            gain: [0.8, 0.75, 0.85],
            offset: [55.0, 60.0, 35.0],
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
        }
    }

    pub fn apply(&self, px: [f64; 3]) -> [u8; 3] {
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = self.gain[c] * px[self.order[c]] + self.offset[c];
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// Maps a stored pixel back to the pre-transform palette (ignoring clamp).
    pub fn invert(&self, px: [u8; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[self.order[c]] = (px[c] as f64 - self.offset[c]) / self.gain[c];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    /// `(height, width)`.
    pub image_hw: (usize, usize),
    pub jitter_px: usize,
    pub domain: Domain,
    /// Overrides the domain's default palette transform.
    #[serde(default)]
    pub style: Option<DomainStyle>,
    pub seed: u64,
    #[serde(default)]
    pub fractions: SplitFractions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            image_hw: (64, 64),
            jitter_px: 0,
            domain: Domain::Source,
            style: None,
            seed: 0,
            fractions: SplitFractions::default(),
        }
    }
}

impl SynthConfig {
    pub fn style(&self) -> DomainStyle {
        self.style.unwrap_or_else(|| DomainStyle::for_domain(self.domain))
    }

    /// Strip thickness and half-length in pixels.
    pub fn strip_geometry(&self) -> (usize, usize) {
        let (h, w) = self.image_hw;
        let m = h.min(w);
        ((m / 16).max(2), ((m as f64) * 0.3).round().max(2.0) as usize)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub file: String,
    pub image: RgbImage,
    pub label: Label,
    /// Bounding box of all strips drawn, if any.
    pub motif: Option<PixelBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub images: Vec<SynthImage>,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Copy)]
enum Strip {
    Horizontal,
    Vertical,
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthSet> {
    let (h, w) = config.image_hw;
    if config.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("image size {h}x{w} is too small")));
    }
    if 2 * config.jitter_px >= h.min(w) {
        return Err(Error::Config(format!(
            "jitter {} must be below half the image size",
            config.jitter_px
        )));
    }
    let style = config.style();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prefix = match config.domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    let mut images = Vec::with_capacity(2 * config.n_per_class);
    let mut manifest = DatasetManifest::new(config.seed, SYNTH_VERSION);
    for i in 0..2 * config.n_per_class {
        let label = if i % 2 == 0 { Label::Safe } else { Label::Dangerous };
        let (image, motif) = draw(config, style, label, &mut rng);
        let file = format!("{prefix}_{i:05}.ppm");
        manifest.entries.push(ManifestEntry {
            image: file.clone(),
            label,
            domain: config.domain,
            cell: None,
            split: Split::Train,
            pseudo: false,
        });
        images.push(SynthImage {
            file,
            image,
            label,
            motif,
        });
    }
    assign_splits(&mut manifest, config.fractions, config.seed ^ 0x5eed)?;
    Ok(SynthSet { images, manifest })
}

fn draw(config: &SynthConfig, style: DomainStyle, label: Label, rng: &mut ChaCha8Rng) -> (RgbImage, Option<PixelBox>) {
    let (h, w) = config.image_hw;
    let mut canvas = vec![[0.0f64; 3]; h * w];

    let lift: f64 = rng.random_range(-15.0..15.0);
    let background = [70.0 + lift, 95.0 + lift, 65.0 + lift];
    canvas.iter_mut().for_each(|p| *p = background);

    let clutter = rng.random_range(8..15);
    for _ in 0..clutter {
        let bh = rng.random_range(2..6).min(h);
        let bw = rng.random_range(2..6).min(w);
        let y0 = rng.random_range(0..=h - bh);
        let x0 = rng.random_range(0..=w - bw);
        let mut color = [0.0; 3];
        for c in 0..3 {
            color[c] = (background[c] + rng.random_range(-40.0..60.0)).clamp(0.0, 150.0);
        }
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                canvas[y * w + x] = color;
            }
        }
    }

    let strips: Vec<Strip> = match label {
        Label::Dangerous => vec![Strip::Horizontal, Strip::Vertical],
        Label::Safe => match rng.random_range(0..4) {
            0 | 1 => vec![],
            2 => vec![Strip::Horizontal],
            _ => vec![Strip::Vertical],
        },
    };
    let j = config.jitter_px as i64;
    let dy = rng.random_range(-j..=j);
    let dx = rng.random_range(-j..=j);
    let cy = h as i64 / 2 + dy;
    let cx = w as i64 / 2 + dx;
    let (thick, half) = config.strip_geometry();
    let (thick, half) = (thick as i64, half as i64);
    let shade: f64 = rng.random_range(-10.0..10.0);
    let strip_color = [STRIP_RGB[0] + shade, STRIP_RGB[1] + shade, STRIP_RGB[2] + shade];

    let mut motif: Option<PixelBox> = None;
    for s in &strips {
        let (y0, y1, x0, x1) = match s {
            Strip::Horizontal => (cy - thick / 2, cy - thick / 2 + thick, cx - half, cx + half),
            Strip::Vertical => (cy - half, cy + half, cx - thick / 2, cx - thick / 2 + thick),
        };
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let b = PixelBox {
            x0: clip(x0, w),
            y0: clip(y0, h),
            x1: clip(x1, w),
            y1: clip(y1, h),
        };
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                canvas[y * w + x] = strip_color;
            }
        }
        motif = Some(match motif {
            None => b,
            Some(m) => PixelBox {
                x0: m.x0.min(b.x0),
                y0: m.y0.min(b.y0),
                x1: m.x1.max(b.x1),
                y1: m.y1.max(b.y1),
            },
        });
    }

    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut px = canvas[y * w + x];
            for v in px.iter_mut() {
                *v += rng.random_range(-8.0..8.0);
            }
            img.put(x, y, style.apply(px));
        }
    }
    (img, motif)
}

/// Writes every image as P6 plus `manifest.jsonl` into `dir`.
pub fn write_synth(set: &SynthSet, dir: impl AsRef<Path>, manifest_name: &str) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut written = Vec::with_capacity(set.images.len() + 1);
    for img in &set.images {
        img.image.write_ppm(dir.join(&img.file))?;
        written.push(img.file.clone());
    }
    set.manifest.write(dir.join(manifest_name))?;
    written.push(manifest_name.to_string());
    Ok(written)
}

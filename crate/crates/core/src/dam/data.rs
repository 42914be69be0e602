use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{DatasetManifest, SynthSet};
use crate::imageio::RgbImage;
use crate::tensor::Tensor;

/// Images held in memory as `[3, H, W]` tensors scaled to `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

/// Maps 8-bit pixels onto `[-1, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let mut t = img.to_tensor();
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    t
}

impl Dataset {
    pub fn push(&mut self, name: impl Into<String>, image: Tensor, label: usize) {
        self.names.push(name.into());
        self.images.push(image);
        self.labels.push(label);
    }

    /// Loads every entry of `manifest`, resolving image paths against `dir`.
    pub fn from_manifest(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut out = Self::default();
        for e in &manifest.entries {
            let img = RgbImage::read_ppm(dir.join(&e.image))?;
            out.push(e.image.clone(), image_tensor(&img), e.label.index());
        }
        Ok(out)
    }

    /// In-memory view of generated images, keeping those `keep` accepts.
    pub fn from_synth(set: &SynthSet, keep: impl Fn(&crate::geo::ManifestEntry) -> bool) -> Self {
        let mut out = Self::default();
        for (img, e) in set.images.iter().zip(&set.manifest.entries) {
            if keep(e) {
                out.push(img.file.clone(), image_tensor(&img.image), img.label.index());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Stacks the listed images into `[n, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("image index {i} out of range {}", self.len())))
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&items)?)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut out = self.clone();
        out.images.extend(other.images.iter().cloned());
        out.labels.extend(&other.labels);
        out.names.extend(other.names.iter().cloned());
        out
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the conv-2 map is cut into subregions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Full-width horizontal bands.
    HS,
    /// Full-height vertical bands.
    VS,
    /// An `r x r` grid of blocks, `r^2 = count`.
    SQ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubregionScheme {
    pub kind: SchemeKind,
    pub count: usize,
}

impl SubregionScheme {
    pub fn new(kind: SchemeKind, count: usize) -> Self {
        Self { kind, count }
    }
}

/// One convolution: output width, square kernel, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            width,
            kernel,
            stride,
            pad,
        }
    }

    fn out_extent(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        (self.stride >= 1 && self.kernel >= 1 && self.kernel <= padded)
            .then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Architecture of the attention model.
///
/// The global network is a stack of conv stages (`stages[0]` is conv 1).
/// Subregions are cut from the output of `stages[region_stage]` (conv 2) and
/// the selected subregion's local feature map is concatenated onto the output
/// of `stages[fusion_stage]` (conv 4). Stages past the fusion point, the
/// optional adaptation convs, global pooling, `fc` and the classifier head
/// follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DamConfig {
    /// `(height, width)` of input images.
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    pub stages: Vec<ConvSpec>,
    /// Adds one identity-skip `conv -> relu` block after every stage conv.
    pub residual: bool,
    pub region_stage: usize,
    pub fusion_stage: usize,
    /// Disables the local network entirely (plain backbone baseline).
    pub local_branch: bool,
    pub schemes: Vec<SubregionScheme>,
    /// Spatial size each subregion is ROI-pooled to.
    pub roi_hw: (usize, usize),
    pub local_kernel: usize,
    /// Widths of the two local convs in attention mode.
    pub local_widths: (usize, usize),
    /// Widths of the two local convs in adaptation mode.
    pub local_widths_da: (usize, usize),
    /// Adaptation mode: adds two 1x1 dimension-reducing convs after fusion
    /// and swaps in `local_widths_da`.
    pub da_mode: bool,
    pub da_widths: (usize, usize),
    /// Width `d` of the `fc` feature vector.
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for DamConfig {
    fn default() -> Self {
        Self {
            input_hw: (64, 64),
            in_channels: 3,
            stages: vec![
                ConvSpec::new(16, 4, 4, 0),
                ConvSpec::new(32, 3, 2, 1),
                ConvSpec::new(64, 3, 2, 1),
                ConvSpec::new(128, 3, 1, 1),
            ],
            residual: true,
            region_stage: 1,
            fusion_stage: 3,
            local_branch: true,
            schemes: vec![SubregionScheme::new(SchemeKind::SQ, 4)],
            roi_hw: (7, 7),
            local_kernel: 3,
            local_widths: (16, 16),
            local_widths_da: (16, 8),
            da_mode: false,
            da_widths: (64, 32),
            feature_dim: 64,
            num_classes: 2,
        }
    }
}

/// `(channels, height, width)` of a feature map.
pub type MapShape = (usize, usize, usize);

impl DamConfig {
    /// Tiny widths for finite-difference checks.
    pub fn tiny(input_hw: (usize, usize), schemes: Vec<SubregionScheme>) -> Self {
        Self {
            input_hw,
            stages: vec![
                ConvSpec::new(2, 3, 2, 1),
                ConvSpec::new(3, 3, 2, 1),
                ConvSpec::new(3, 3, 1, 1),
                ConvSpec::new(4, 3, 2, 1),
            ],
            schemes,
            local_widths: (2, 3),
            local_widths_da: (2, 2),
            da_widths: (3, 3),
            feature_dim: 3,
            ..Self::default()
        }
    }

    pub fn local_widths(&self) -> (usize, usize) {
        if self.da_mode {
            self.local_widths_da
        } else {
            self.local_widths
        }
    }

    /// Output shape of every stage, with fused channels counted at and
    /// after the fusion stage's consumers.
    pub fn stage_shapes(&self) -> Result<Vec<MapShape>> {
        let (mut h, mut w) = self.input_hw;
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            h = s
                .out_extent(h)
                .ok_or_else(|| Error::Config(format!("stage {i} does not fit input height {h}")))?;
            w = s
                .out_extent(w)
                .ok_or_else(|| Error::Config(format!("stage {i} does not fit input width {w}")))?;
            shapes.push((s.width, h, w));
        }
        Ok(shapes)
    }

    /// Channels of the map right after fusion.
    pub fn fused_channels(&self) -> usize {
        let global = self.stages.get(self.fusion_stage).map_or(0, |s| s.width);
        if self.local_branch {
            global + self.local_widths().1
        } else {
            global
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.in_channels == 0 || self.stages.is_empty() {
            return bad("need at least one stage and one input channel".into());
        }
        let (l1, l2) = self.local_widths();
        let widths = self
            .stages
            .iter()
            .map(|s| s.width)
            .chain([l1, l2, self.da_widths.0, self.da_widths.1]);
        if widths.clone().any(|w| w == 0) {
            return bad("all widths must be >= 1".into());
        }
        if self.fusion_stage >= self.stages.len() {
            return bad(format!(
                "fusion_stage {} but only {} stages",
                self.fusion_stage,
                self.stages.len()
            ));
        }
        if self.local_branch {
            if self.region_stage > self.fusion_stage {
                return bad("region_stage must not come after fusion_stage".into());
            }
            if self.schemes.is_empty() {
                return bad("at least one subregion scheme is required".into());
            }
            if self.roi_hw.0 == 0 || self.roi_hw.1 == 0 || self.local_kernel == 0 {
                return bad("roi size and local kernel must be >= 1".into());
            }
        }
        let shapes = self.stage_shapes()?;
        if self.local_branch {
            let (_, h, w) = shapes[self.region_stage];
            super::partition_regions((h, w), &self.schemes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let c = DamConfig::default();
        c.validate().unwrap();
        let s = c.stage_shapes().unwrap();
        assert_eq!(s, vec![(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 4, 4)]);
        assert_eq!(c.fused_channels(), 128 + 16);
    }

    #[test]
    fn json_roundtrip_rejects_unknown() {
        let c = DamConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DamConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<DamConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: DamConfig = serde_json::from_str(r#"{"feature_dim": 8}"#).unwrap();
        assert_eq!(partial.feature_dim, 8);
    }

    #[test]
    fn validation_errors() {
        let mut c = DamConfig::default();
        c.feature_dim = 1;
        assert!(c.validate().is_err());
        let mut c = DamConfig::default();
        c.schemes.clear();
        assert!(c.validate().is_err());
        let mut c = DamConfig::default();
        c.schemes = vec![SubregionScheme::new(SchemeKind::HS, 9)];
        assert!(c.validate().is_err());
        let mut c = DamConfig::default();
        c.input_hw = (2, 2);
        assert!(c.validate().is_err());
    }
}

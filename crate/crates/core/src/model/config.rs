use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// UNet-style blocks of two 3×3 convolutions, the first with stride 2.
    Baseline,
    /// Residual stages of basic blocks, [3, 4, 6, 3] deep.
    ResNet34,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Loss on the final score map only.
    Plain,
    /// Loss summed over every decoder block's probability map.
    DeepSupervision,
    /// Final map is the softmax of a learned weighted sum of upsampled block scores.
    LinearMerge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub head: HeadKind,
    /// Number of decoder blocks.
    pub depth: usize,
    pub patch_size: usize,
    /// Scales every channel count; 1.0 reproduces the full-size network.
    pub width: f64,
    pub focal_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::ResNet34,
            head: HeadKind::DeepSupervision,
            depth: 5,
            patch_size: 512,
            width: 1.0,
            focal_gamma: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn new(encoder: EncoderKind, head: HeadKind, depth: usize, patch_size: usize, width: f64) -> Self {
        Self { encoder, head, depth, patch_size, width, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.encoder == EncoderKind::ResNet34 && self.depth > 5 {
            return Err(Error::Config(format!("ResNet34 encoder supports depth up to 5, got {}", self.depth)));
        }
        let unit = 1usize << (self.depth + 1);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of 2^(depth+1) = {unit}",
                self.patch_size
            )));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::Config(format!("width multiplier must be in (0, 1], got {}", self.width)));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be finite and non-negative, got {}", self.focal_gamma)));
        }
        Ok(())
    }

    /// Spatial size of decoder block `level`'s output.
    pub fn level_size(&self, level: usize) -> usize {
        (self.patch_size >> self.depth) << (level + 1)
    }

    pub(crate) fn channels(&self, full: usize) -> usize {
        ((full as f64 * self.width).round() as usize).max(2)
    }
}

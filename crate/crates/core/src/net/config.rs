use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one residual branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stage_strides: Vec<usize>,
    pub input_size: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig::with_width(16, 64)
    }
}

impl BranchConfig {
    /// Stages `[w, 2w, 4w]` with strides `[1, 2, 2]`.
    pub fn with_width(width: usize, input_size: usize) -> Self {
        BranchConfig {
            in_channels: 3,
            stem_channels: width,
            stage_channels: vec![width, 2 * width, 4 * width],
            blocks_per_stage: 2,
            stage_strides: vec![1, 2, 2],
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::config("channel and block counts must be >= 1"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config(format!(
                "{} stage widths but {} stage strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::config("stage widths and strides must be >= 1"));
        }
        let total = self.total_stride();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return Err(Error::config(format!(
                "input size {} is not divisible by total stride {total}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Side length `m` of the final feature maps.
    pub fn map_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    /// Channels `C` of the final feature maps (the pooled vector width).
    pub fn out_channels(&self) -> usize {
        *self
            .stage_channels
            .last()
            .expect("validated config has stages")
    }
}

/// Which inputs a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Multimodal,
    Fundus,
    Oct,
}

impl Modality {
    pub fn uses_fundus(self) -> bool {
        matches!(self, Modality::Multimodal | Modality::Fundus)
    }

    pub fn uses_oct(self) -> bool {
        matches!(self, Modality::Multimodal | Modality::Oct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Multimodal => "multimodal",
            Modality::Fundus => "fundus",
            Modality::Oct => "oct",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(Modality::Multimodal),
            "fundus" => Ok(Modality::Fundus),
            "oct" => Ok(Modality::Oct),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = BranchConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.map_size(), 16);
        assert_eq!(cfg.out_channels(), 64);
    }

    #[test]
    fn full_scale_geometry_reaches_fourteen() {
        // 448 input with a 32x reduction gives the 14x14 pooling window.
        let mut cfg = BranchConfig::with_width(64, 448);
        cfg.stage_channels = vec![64, 128, 256, 512];
        cfg.stage_strides = vec![4, 2, 2, 2];
        cfg.validate().unwrap();
        assert_eq!(cfg.map_size(), 14);
        assert_eq!(cfg.out_channels(), 512);
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = BranchConfig::with_width(8, 30);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::SampleRatio;

/// How the full-resolution image enters and leaves the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Pixel unshuffle at the input, pixel shuffle at the output, both by `t`.
    #[default]
    Spsm,
    /// Bilinear down/up sampling by 2 with `t = 1`.
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t: usize,
    pub in_channels: usize,
    pub boundary: Boundary,
    pub stage_widths: Vec<usize>,
    pub trsu_depths: Vec<usize>,
    pub trsu_mid_widths: Vec<usize>,
    pub mid_block_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 2,
            in_channels: 3,
            boundary: Boundary::Spsm,
            stage_widths: vec![40, 64, 160, 512],
            trsu_depths: vec![4, 3, 2, 1],
            trsu_mid_widths: vec![20, 32, 80, 256],
            mid_block_layers: 4,
        }
    }
}

/// Bilinear boundary resampling factor.
pub const BILINEAR_FACTOR: usize = 2;

impl ModelConfig {
    /// Two-stage configuration small enough for desk-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            t: 2,
            in_channels: 3,
            boundary: Boundary::Spsm,
            stage_widths: vec![8, 16],
            trsu_depths: vec![2, 1],
            trsu_mid_widths: vec![8, 16],
            mid_block_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_widths.len();
        if s < 2 {
            return Err(Error::Config(format!("need at least 2 stages, got {s}")));
        }
        if self.trsu_depths.len() != s || self.trsu_mid_widths.len() != s {
            return Err(Error::Config(format!(
                "stage_widths ({s}), trsu_depths ({}) and trsu_mid_widths ({}) must have equal length",
                self.trsu_depths.len(),
                self.trsu_mid_widths.len()
            )));
        }
        if self
            .stage_widths
            .iter()
            .chain(&self.trsu_mid_widths)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        SampleRatio::new(self.t)?;
        if self.boundary == Boundary::Bilinear && self.t != 1 {
            return Err(Error::Config(format!(
                "bilinear boundary requires t = 1, got t = {}",
                self.t
            )));
        }
        if self.max_log2_reduction() > 16 {
            return Err(Error::Config(
                "stage count plus TRSU depth too large".into(),
            ));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn ratio(&self) -> SampleRatio {
        SampleRatio::new(self.t.max(1)).expect("t >= 1")
    }

    /// Spatial reduction between the image and the first encoder stage.
    pub fn boundary_factor(&self) -> usize {
        match self.boundary {
            Boundary::Spsm => self.t,
            Boundary::Bilinear => BILINEAR_FACTOR,
        }
    }

    /// Channels after the input boundary.
    pub fn stem_in_channels(&self) -> usize {
        match self.boundary {
            Boundary::Spsm => self.in_channels * self.t * self.t,
            Boundary::Bilinear => self.in_channels,
        }
    }

    /// Channels produced by the head before the output boundary.
    pub fn head_out_channels(&self) -> usize {
        match self.boundary {
            Boundary::Spsm => self.t * self.t,
            Boundary::Bilinear => 1,
        }
    }

    fn max_log2_reduction(&self) -> usize {
        let s = self.num_stages();
        let trsu = self
            .trsu_depths
            .iter()
            .enumerate()
            .map(|(i, d)| i + d)
            .max()
            .unwrap_or(0);
        s.max(trsu)
    }

    /// Input height and width must be multiples of this value.
    pub fn required_multiple(&self) -> usize {
        self.boundary_factor() << self.max_log2_reduction()
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a multiple of {m} for this configuration"
            )));
        }
        Ok(())
    }

    /// Output width of decoder stage `i`; it matches encoder stage `i - 1`
    /// so the additive skip above it lines up.
    pub fn decoder_out_width(&self, i: usize) -> usize {
        if i == 0 {
            self.stage_widths[0]
        } else {
            self.stage_widths[i - 1]
        }
    }

    pub fn encoder_in_width(&self, i: usize) -> usize {
        if i == 0 {
            self.stage_widths[0]
        } else {
            self.stage_widths[i - 1]
        }
    }

    /// Name of the first field that differs from `other`, if any.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        if self.t != other.t {
            Some("t")
        } else if self.in_channels != other.in_channels {
            Some("in_channels")
        } else if self.boundary != other.boundary {
            Some("boundary")
        } else if self.stage_widths != other.stage_widths {
            Some("stage_widths")
        } else if self.trsu_depths != other.trsu_depths {
            Some("trsu_depths")
        } else if self.trsu_mid_widths != other.trsu_mid_widths {
            Some("trsu_mid_widths")
        } else if self.mid_block_layers != other.mid_block_layers {
            Some("mid_block_layers")
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_multiple() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.required_multiple(), 32);
        assert!(c.check_input_size(640, 640).is_ok());
        assert!(c.check_input_size(640, 630).is_err());
    }

    #[test]
    fn deep_trsu_raises_multiple() {
        let c = ModelConfig {
            trsu_depths: vec![5, 1],
            ..ModelConfig::tiny()
        };
        assert_eq!(c.required_multiple(), 2 << 5);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::tiny();
        c.trsu_depths.push(1);
        assert!(c.validate().is_err());
        let c = ModelConfig {
            stage_widths: vec![8],
            trsu_depths: vec![1],
            trsu_mid_widths: vec![4],
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            boundary: Boundary::Bilinear,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            t: 0,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn first_difference_names_field() {
        let a = ModelConfig::tiny();
        let mut b = a.clone();
        assert_eq!(a.first_difference(&b), None);
        b.trsu_mid_widths[1] = 3;
        b.mid_block_layers = 9;
        assert_eq!(a.first_difference(&b), Some("trsu_mid_widths"));
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"t": 3, "boundary": "spsm"}"#).unwrap();
        assert_eq!(c.t, 3);
        assert_eq!(c.stage_widths, ModelConfig::default().stage_widths);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"widths": [1]}"#).is_err());
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dilation rates of the sixteen layers of the lower (dilated) branch.
pub const HDC_RATES: [usize; 16] = [1, 2, 3, 4, 5, 6, 7, 8, 7, 6, 5, 4, 3, 2, 1, 1];

/// Conv blocks per scale of the upper U-shaped branch:
/// full, ½, ¼ (bottleneck), ½, full.
pub const UPPER_BLOCKS: [usize; 5] = [2, 2, 4, 2, 2];

/// The full model and its nine ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoShortSkip,
    NoLongSkip,
    NoScam,
    NoSam,
    NoCam,
    SerialSamThenCam,
    SerialCamThenSam,
    UpperOnly,
    LowerOnly,
}

/// How the attention module combines its spatial and channel paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionLayout {
    Parallel,
    SpatialOnly,
    ChannelOnly,
    SpatialThenChannel,
    ChannelThenSpatial,
    Disabled,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::NoShortSkip,
        Variant::NoLongSkip,
        Variant::NoScam,
        Variant::NoSam,
        Variant::NoCam,
        Variant::SerialSamThenCam,
        Variant::SerialCamThenSam,
        Variant::UpperOnly,
        Variant::LowerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoShortSkip => "no_short_skip",
            Variant::NoLongSkip => "no_long_skip",
            Variant::NoScam => "no_scam",
            Variant::NoSam => "no_sam",
            Variant::NoCam => "no_cam",
            Variant::SerialSamThenCam => "serial_sam_then_cam",
            Variant::SerialCamThenSam => "serial_cam_then_sam",
            Variant::UpperOnly => "upper_only",
            Variant::LowerOnly => "lower_only",
        }
    }

    /// Row of the ablation table this variant corresponds to (1–10; the
    /// full model is the last row).
    pub fn ablation_row(self) -> u8 {
        match self {
            Variant::NoShortSkip => 1,
            Variant::NoLongSkip => 2,
            Variant::NoScam => 3,
            Variant::NoSam => 4,
            Variant::NoCam => 5,
            Variant::SerialSamThenCam => 6,
            Variant::SerialCamThenSam => 7,
            Variant::UpperOnly => 8,
            Variant::LowerOnly => 9,
            Variant::Full => 10,
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).expect("listed") as u8
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }

    pub fn attention(self) -> AttentionLayout {
        match self {
            Variant::NoScam => AttentionLayout::Disabled,
            Variant::NoSam => AttentionLayout::ChannelOnly,
            Variant::NoCam => AttentionLayout::SpatialOnly,
            Variant::SerialSamThenCam => AttentionLayout::SpatialThenChannel,
            Variant::SerialCamThenSam => AttentionLayout::ChannelThenSpatial,
            _ => AttentionLayout::Parallel,
        }
    }

    /// Skips inside the two branches.
    pub fn short_skips(self) -> bool {
        self != Variant::NoShortSkip
    }

    /// The global `+ y` residual and the attention-module residual.
    pub fn long_skips(self) -> bool {
        self != Variant::NoLongSkip
    }

    pub fn has_upper(self) -> bool {
        self != Variant::LowerOnly
    }

    pub fn has_lower(self) -> bool {
        self != Variant::UpperOnly
    }

    /// Variants that only rewire skips and keep every layer.
    pub fn is_rewiring_only(self) -> bool {
        matches!(self, Variant::NoShortSkip | Variant::NoLongSkip)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image channels: 1 (gray) or 3 (colour).
    pub in_channels: usize,
    /// Feature channels of every hidden layer.
    pub width: usize,
    pub variant: Variant,
    /// Channel-attention bottleneck ratio.
    pub cam_reduction: usize,
    /// Kernel size of the spatial-attention convolution.
    pub sam_kernel: usize,
    pub upper_blocks: [usize; 5],
    pub lower_rates: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            width: 64,
            variant: Variant::Full,
            cam_reduction: 8,
            sam_kernel: 7,
            upper_blocks: UPPER_BLOCKS,
            lower_rates: HDC_RATES.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn gray() -> Self {
        Self::default()
    }

    pub fn color() -> Self {
        ModelConfig {
            in_channels: 3,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.cam_reduction == 0 || !self.width.is_multiple_of(self.cam_reduction) {
            return Err(Error::Config(format!(
                "cam_reduction {} must divide width {}",
                self.cam_reduction, self.width
            )));
        }
        if self.sam_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("sam_kernel must be odd, got {}", self.sam_kernel)));
        }
        if self.lower_rates.len() != 16 {
            return Err(Error::Config(format!(
                "lower_rates needs 16 dilation rates, got {}",
                self.lower_rates.len()
            )));
        }
        if self.lower_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        if self.upper_blocks.contains(&0) {
            return Err(Error::Config("every upper-branch scale needs at least one block".into()));
        }
        Ok(())
    }
}

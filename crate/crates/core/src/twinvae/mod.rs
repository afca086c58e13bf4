//! Twin variational autoencoder.
//!
//! Two domain branches (`nat`, `syn`) each own four strided convolutions on
//! the way in and five transposed convolutions on the way out. Everything in
//! between is stored exactly once and used by both branches: the fifth
//! convolution, the fully connected bottleneck, the first transposed
//! convolution with its batch normalization, and the count regressor that
//! reads the shared representation.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, CheckpointMeta, RngState};
pub use model::{
    reparameterize, BatchOutput, Branch, ForwardOutput, LatentCode, Mode, ModelParams, OutputGrads, Regressor,
    SharedCore, Trace, ParamGroup,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Where the regressor reads the shared representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegressorTap {
    /// The sampled latent vector `z` (the mean in evaluation mode).
    #[default]
    Latent,
    /// The latent mean `mu`, in training as well as evaluation, so the
    /// regressor sees the same input distribution in both modes.
    LatentMean,
    /// Global average of the shared transposed-convolution feature map.
    SharedDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Multiplier on every convolution width (1.0 gives 32/64/128/256 and a
    /// 512-wide shared core).
    pub channel_scale: f64,
    pub latent_dim: usize,
    /// Width of the shared convolution and the bottleneck layers around the
    /// latent code. Defaults to `512 · channel_scale`.
    pub shared_channels: Option<usize>,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub regressor_tap: RegressorTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_scale: 1.0,
            latent_dim: 256,
            shared_channels: None,
            dropout_rate: 0.1,
            leaky_slope: 0.2,
            regressor_tap: RegressorTap::Latent,
        }
    }
}

impl ModelConfig {
    pub fn scaled(channel_scale: f64) -> Self {
        ModelConfig {
            channel_scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return Err(invalid(format!("channel_scale must be > 0, got {}", self.channel_scale)));
        }
        if self.latent_dim < 2 {
            return Err(invalid(format!("latent_dim must be >= 2, got {}", self.latent_dim)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(invalid(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope)));
        }
        if self.shared_channels == Some(0) {
            return Err(invalid("shared_channels must be >= 1"));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Output channels of the four domain encoder convolutions.
    pub fn encoder_channels(&self) -> [usize; 4] {
        [self.width(32), self.width(64), self.width(128), self.width(256)]
    }

    pub fn shared_width(&self) -> usize {
        self.shared_channels.unwrap_or_else(|| self.width(512))
    }

    /// Output channels of the shared transposed convolution.
    pub fn shared_decoder_channels(&self) -> usize {
        self.width(256)
    }

    /// Output channels of the five domain decoder layers.
    pub fn decoder_channels(&self) -> [usize; 5] {
        [self.width(128), self.width(64), self.width(32), self.width(32), 1]
    }

    pub fn regressor_input(&self) -> usize {
        match self.regressor_tap {
            RegressorTap::Latent | RegressorTap::LatentMean => self.latent_dim,
            RegressorTap::SharedDecoder => self.shared_decoder_channels(),
        }
    }
}

/// Spatial sizes along the encoder: input, four domain convolutions, shared
/// convolution.
pub const ENCODER_SIZES: [usize; 6] = [128, 64, 32, 16, 8, 4];
/// Spatial sizes along the decoder: reshaped code, shared transposed
/// convolution, five domain layers.
pub const DECODER_SIZES: [usize; 7] = [1, 5, 13, 29, 61, 62, 128];
pub const ENCODER_KERNEL: usize = 5;
pub const ENCODER_STRIDE: usize = 2;
pub const ENCODER_PAD: usize = 2;
pub const DECODER_KERNELS: [usize; 5] = [5, 5, 5, 2, 6];
pub const DECODER_STRIDES: [usize; 5] = [2, 2, 2, 1, 2];
pub const REGRESSOR_HIDDEN: [usize; 2] = [256, 128];

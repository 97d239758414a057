//! The sequence attention U-Net and its domain discriminator.
//!
//! The segmenter consumes T adjacent axial slices and predicts a mask for
//! the center slice: three conv-ELU encoder blocks with 2x2 max pooling,
//! a bidirectional convolutional LSTM over the sequence at the bottleneck,
//! a decoder with additive attention gates on the skip connections, a second
//! bidirectional convolutional LSTM that collapses the sequence at the
//! output, and a sigmoid head. The discriminator classifies bottleneck
//! feature maps (source vs. target domain) from their per-sequence pixel sum.

mod attention;
mod clstm;
mod discriminator;
mod unet;

pub use attention::{attention_gate, AttentionGate, AttentionGateCache};
pub use clstm::{
    bidirectional_clstm, center_step, conv_lstm_step, BiConvLstm, BiConvLstmCache, ConvLstm,
    LstmStepCache, SeqMode,
};
pub use discriminator::{discriminator_forward, DiscriminatorCache, DiscriminatorParams};
pub use unet::{seq_unet_forward, ConvBlock, SeqUnetCache, SeqUnetParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// `width_scale = 1.0` gives the reference channel widths (encoder
/// 64/128/256, bottleneck LSTM hidden 256 per direction, output LSTM hidden
/// 32 per direction, discriminator 512->256->128->128). Smaller scales shrink
/// every channel count proportionally (minimum 1), which keeps the whole
/// topology intact for fast tests and desk-scale benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image channels per slice.
    pub in_channels: usize,
    /// Slices per sequence (T).
    pub seq_len: usize,
    /// Input height; must be divisible by 8 (three pooling stages).
    pub height: usize,
    /// Input width; must be divisible by 8.
    pub width: usize,
    /// Channel width multiplier.
    pub width_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            seq_len: 3,
            height: 64,
            width: 64,
            width_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn with_input(height: usize, width: usize) -> Self {
        ModelConfig { height, width, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.seq_len == 0 {
            return Err(Error::Config("in_channels and seq_len must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be positive and divisible by 8",
                self.height, self.width
            )));
        }
        if !(self.width_scale > 0.0) {
            return Err(Error::Config("width_scale must be positive".into()));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Encoder block widths, shallow to deep.
    pub fn encoder_channels(&self) -> [usize; 3] {
        [self.scaled(64), self.scaled(128), self.scaled(256)]
    }

    /// Bottleneck LSTM hidden size per direction.
    pub fn bottleneck_hidden(&self) -> usize {
        self.scaled(256)
    }

    /// Channels of the bottleneck feature map (both directions concatenated).
    pub fn bottleneck_channels(&self) -> usize {
        2 * self.bottleneck_hidden()
    }

    /// Output LSTM hidden size per direction.
    pub fn output_hidden(&self) -> usize {
        self.scaled(32)
    }

    /// Decoder block widths, deep to shallow.
    pub fn decoder_channels(&self) -> [usize; 3] {
        [self.scaled(256), self.scaled(128), self.scaled(64)]
    }

    /// Discriminator conv widths after the input layer.
    pub fn discriminator_channels(&self) -> [usize; 3] {
        [self.scaled(256), self.scaled(128), self.scaled(128)]
    }

    /// Spatial size of the bottleneck feature map.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_matches_reference_widths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoder_channels(), [64, 128, 256]);
        assert_eq!(cfg.bottleneck_hidden(), 256);
        assert_eq!(cfg.bottleneck_channels(), 512);
        assert_eq!(cfg.output_hidden(), 32);
        assert_eq!(cfg.decoder_channels(), [256, 128, 64]);
        assert_eq!(cfg.discriminator_channels(), [256, 128, 128]);
        assert_eq!(cfg.bottleneck_hw(), (8, 8));
    }

    #[test]
    fn scaled_widths_never_hit_zero() {
        let cfg = ModelConfig { width_scale: 1.0 / 64.0, ..Default::default() };
        assert!(cfg.encoder_channels().iter().all(|&c| c >= 1));
        assert_eq!(cfg.output_hidden(), 1);
    }

    #[test]
    fn validation_rejects_bad_input_sizes() {
        let cfg = ModelConfig { height: 60, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}

//! Model and entropy-coder configuration.

use serde::{Deserialize, Serialize};

/// Lower clamp for Gaussian scale parameters.
pub const SIGMA_MIN: f64 = 0.11;
/// Upper clamp for Gaussian scale parameters.
pub const SIGMA_MAX: f64 = 256.0;
/// Number of logarithmic sigma bins used for frozen Gaussian CDF tables.
pub const SIGMA_BINS: usize = 64;
/// Symbols in [-SYMBOL_RANGE, SYMBOL_RANGE] are coded from tables; anything
/// outside goes through the escape path.
pub const SYMBOL_RANGE: i32 = 64;
/// CDF tables carry 16-bit precision: total mass is exactly `1 << 16`.
pub const CDF_TOTAL: u32 = 1 << 16;
/// Probability floor used by both rate estimates, matching one table unit.
pub const PROB_FLOOR: f64 = 1.0 / CDF_TOTAL as f64;

/// Static shape of every network in the codec.
///
/// Latent and hyper widths apply to fine motion and residual alike; the
/// coarse motion branch reuses `latent_ch` for its own (factorized-prior)
/// latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature-space channel count (frame is lifted to feat_ch x H/2 x W/2).
    pub feat_ch: usize,
    /// Entropy-coded latent channel count for motion and residual.
    pub latent_ch: usize,
    /// Hyper-latent channel count.
    pub hyper_ch: usize,
    /// Trunk width of the mode / skip prediction networks.
    pub mode_ch: usize,
    /// Deformable convolution kernel size (square).
    pub deform_kernel: usize,
    /// Deformable convolution offset groups.
    pub deform_groups: usize,
    /// Identifier written into bitstreams; decode refuses a mismatch.
    pub model_id: u8,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn desk() -> Self {
        ModelConfig {
            feat_ch: 64,
            latent_ch: 128,
            hyper_ch: 128,
            mode_ch: 128,
            deform_kernel: 3,
            deform_groups: 8,
            model_id: 0,
        }
    }

    /// Shrunk configuration for fast tests and toy ablations.
    pub fn tiny() -> Self {
        ModelConfig {
            feat_ch: 16,
            latent_ch: 32,
            hyper_ch: 32,
            mode_ch: 32,
            deform_kernel: 3,
            deform_groups: 2,
            model_id: 0,
        }
    }

    /// Offset-map channel count: 2 * k^2 * groups.
    pub fn offset_ch(&self) -> usize {
        2 * self.deform_kernel * self.deform_kernel * self.deform_groups
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_channels_follow_kernel_and_groups() {
        assert_eq!(ModelConfig::desk().offset_ch(), 144);
        assert_eq!(ModelConfig::tiny().offset_ch(), 36);
    }
}

//! DropBlock structured regularization.
//!
//! Instead of dropping independent activations, DropBlock zeroes contiguous
//! `block_size`×`block_size` squares. Seed positions are sampled only where a
//! full square fits, so drop regions never clip at the borders, and the
//! surviving activations are rescaled by one global factor so the expected
//! activation sum is preserved.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::seed::stream_rng;

/// Sampling parameters for one DropBlock application.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DropBlockState {
    /// Probability mass to keep, in (0, 1]. 1 disables dropping.
    pub keep_prob: f64,
    /// Side length of the square drop regions.
    pub block_size: usize,
    /// Seed making the sampled mask reproducible.
    pub rng_seed: u64,
}

/// Seed-sampling rate γ chosen so the expected dropped fraction matches
/// `1 − keep_prob`: γ = (1−kp)/bs² · (H·W)/((H−bs+1)(W−bs+1)).
pub(crate) fn seed_rate(keep_prob: f64, block_size: usize, h: usize, w: usize) -> f64 {
    let bs = block_size as f64;
    let valid = ((h - block_size + 1) * (w - block_size + 1)) as f64;
    ((1.0 - keep_prob) / (bs * bs) * (h * w) as f64 / valid).min(1.0)
}

fn validate(state: &DropBlockState, h: usize, w: usize) -> Result<(), ModelError> {
    if state.block_size == 0 {
        return Err(ModelError::Config {
            message: "dropblock block_size must be at least 1".into(),
        });
    }
    if state.block_size > h.min(w) {
        return Err(ModelError::Config {
            message: format!(
                "dropblock block_size {} exceeds feature side {} (min of {h}×{w})",
                state.block_size,
                h.min(w)
            ),
        });
    }
    if !(state.keep_prob > 0.0 && state.keep_prob <= 1.0) {
        return Err(ModelError::Config {
            message: format!(
                "dropblock keep_prob must lie in (0, 1], got {}",
                state.keep_prob
            ),
        });
    }
    Ok(())
}

/// Elementwise multiplier implementing one DropBlock draw: entries are 0
/// inside dropped squares and `total/kept` elsewhere. Applying it is the
/// forward pass; applying it to the output gradient is the backward pass.
pub(crate) fn dropblock_multiplier(
    channels: usize,
    h: usize,
    w: usize,
    state: &DropBlockState,
) -> Result<Array3<f64>, ModelError> {
    validate(state, h, w)?;
    if state.keep_prob >= 1.0 {
        return Ok(Array3::ones((channels, h, w)));
    }
    let gamma = seed_rate(state.keep_prob, state.block_size, h, w);
    let mut rng = stream_rng(state.rng_seed, "dropblock", &[]);
    let bs = state.block_size;
    let r_lo = (bs - 1) / 2;
    let r_hi = bs / 2;
    let mut mask = Array3::<f64>::ones((channels, h, w));
    for c in 0..channels {
        for cy in r_lo..h - r_hi {
            for cx in r_lo..w - r_hi {
                if rng.random_bool(gamma) {
                    for y in cy - r_lo..=cy + r_hi {
                        for x in cx - r_lo..=cx + r_hi {
                            mask[[c, y, x]] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let total = (channels * h * w) as f64;
    let kept = mask.sum();
    if kept == 0.0 {
        // Everything was dropped; there is nothing left to rescale.
        return Ok(mask);
    }
    let scale = total / kept;
    mask.mapv_inplace(|v| v * scale);
    Ok(mask)
}

/// Apply DropBlock to a C×H×W feature tensor. Identity when not training or
/// when `keep_prob` is 1; otherwise deterministic in `state.rng_seed`.
pub fn dropblock(
    features: &Array3<f64>,
    state: &DropBlockState,
    training: bool,
) -> Result<Array3<f64>, ModelError> {
    let (c, h, w) = features.dim();
    validate(state, h, w)?;
    if !training || state.keep_prob >= 1.0 {
        return Ok(features.clone());
    }
    let mult = dropblock_multiplier(c, h, w, state)?;
    Ok(features * &mult)
}

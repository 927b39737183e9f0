//! Deterministic synthetic fixtures: Gaussian block weights and
//! activations with configurable injected pathologies (dominant input
//! channels, tiny-magnitude quantization groups, oversized key channel
//! pairs). Everything derives from a seed through one counter-based
//! stream, so identical seeds give identical tensors.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::block::{BlockDims, BlockWeights};

/// Injection knobs for [`synthetic_block`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OutlierSpec {
    /// Leading input channels of the down and output projections scaled
    /// up, creating dominant channels inside quantization groups.
    pub weight_outlier_channels: usize,
    pub weight_outlier_gain: f64,
    /// Fraction of quantization groups (per layer) scaled down until
    /// their FP8 group scale underflows.
    pub tiny_group_fraction: f64,
    pub tiny_group_gain: f64,
    /// Leading channel pairs of each key head scaled up.
    pub key_outlier_pairs: usize,
    pub key_outlier_gain: f64,
}

impl OutlierSpec {
    /// No injected pathologies.
    pub fn none() -> Self {
        Self {
            weight_outlier_channels: 0,
            weight_outlier_gain: 1.0,
            tiny_group_fraction: 0.0,
            tiny_group_gain: 1.0,
            key_outlier_pairs: 0,
            key_outlier_gain: 1.0,
        }
    }

    /// A mix that exercises every smoothing pass.
    pub fn moderate() -> Self {
        Self {
            weight_outlier_channels: 4,
            weight_outlier_gain: 25.0,
            tiny_group_fraction: 0.25,
            tiny_group_gain: 2f64.powi(-7),
            key_outlier_pairs: 4,
            key_outlier_gain: 30.0,
        }
    }
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self::none()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

fn scale_columns(w: &mut Array2<f64>, count: usize, gain: f64) {
    let count = count.min(w.ncols());
    for r in 0..w.nrows() {
        for c in 0..count {
            w[[r, c]] *= gain;
        }
    }
}

/// Scale a deterministic subset of contiguous 128-wide row spans.
fn shrink_groups(w: &mut Array2<f64>, rng: &mut ChaCha8Rng, fraction: f64, gain: f64) {
    const SPAN: usize = 128;
    if fraction <= 0.0 || w.ncols() < SPAN {
        return;
    }
    let groups_per_row = w.ncols() / SPAN;
    for r in 0..w.nrows() {
        for g in 0..groups_per_row {
            if rng.gen::<f64>() < fraction {
                for c in g * SPAN..(g + 1) * SPAN {
                    w[[r, c]] *= gain;
                }
            }
        }
    }
}

/// Deterministic Gaussian block weights with injected pathologies. The
/// base scale is the Gaussian standard deviation of every layer.
pub fn synthetic_block(
    seed: u64,
    dims: &BlockDims,
    spec: &OutlierSpec,
    base_scale: f64,
) -> BlockWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kv = dims.kv_dim();
    let mut w_q = gaussian(&mut rng, kv, dims.model_dim, base_scale);
    let mut w_k = gaussian(&mut rng, kv, dims.model_dim, base_scale);
    let mut w_v = gaussian(&mut rng, kv, dims.model_dim, base_scale);
    let mut w_o = gaussian(&mut rng, dims.model_dim, kv, base_scale);
    let mut w_up = gaussian(&mut rng, dims.ffn_dim, dims.model_dim, base_scale);
    let mut w_gate = gaussian(&mut rng, dims.ffn_dim, dims.model_dim, base_scale);
    let mut w_down = gaussian(&mut rng, dims.model_dim, dims.ffn_dim, base_scale);

    if spec.key_outlier_pairs > 0 {
        let half = dims.head_dim / 2;
        let pairs = spec.key_outlier_pairs.min(half);
        for h in 0..dims.n_heads {
            for p in 0..pairs {
                for c in [h * dims.head_dim + p, h * dims.head_dim + p + half] {
                    for col in 0..dims.model_dim {
                        w_k[[c, col]] *= spec.key_outlier_gain;
                    }
                }
            }
        }
    }
    if spec.weight_outlier_channels > 0 {
        scale_columns(&mut w_down, spec.weight_outlier_channels, spec.weight_outlier_gain);
        scale_columns(&mut w_o, spec.weight_outlier_channels, spec.weight_outlier_gain);
    }
    if spec.tiny_group_fraction > 0.0 {
        for w in [
            &mut w_q, &mut w_k, &mut w_v, &mut w_o, &mut w_up, &mut w_gate, &mut w_down,
        ] {
            shrink_groups(w, &mut rng, spec.tiny_group_fraction, spec.tiny_group_gain);
        }
    }

    BlockWeights {
        w_q,
        w_k,
        w_v,
        w_o,
        w_up,
        w_gate,
        w_down,
        dims: *dims,
    }
}

/// Deterministic Gaussian activations, unit scale.
pub fn synthetic_activations(seed: u64, tokens: usize, model_dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    gaussian(&mut rng, tokens, model_dim, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensors() {
        let dims = BlockDims {
            model_dim: 128,
            head_dim: 32,
            n_heads: 2,
            ffn_dim: 128,
        };
        let a = synthetic_block(9, &dims, &OutlierSpec::moderate(), 0.05);
        let b = synthetic_block(9, &dims, &OutlierSpec::moderate(), 0.05);
        assert_eq!(a.w_down, b.w_down);
        assert_eq!(a.w_k, b.w_k);
        let c = synthetic_block(10, &dims, &OutlierSpec::moderate(), 0.05);
        assert_ne!(a.w_down, c.w_down);
    }

    #[test]
    fn injected_channel_dominates() {
        let dims = BlockDims {
            model_dim: 128,
            head_dim: 32,
            n_heads: 2,
            ffn_dim: 128,
        };
        let spec = OutlierSpec {
            weight_outlier_channels: 1,
            weight_outlier_gain: 100.0,
            ..OutlierSpec::none()
        };
        let w = synthetic_block(4, &dims, &spec, 0.05);
        let absmax = |c: usize| (0..128).map(|r| w.w_down[[r, c]].abs()).fold(0.0, f64::max);
        let col0 = absmax(0);
        for c in 1..128 {
            assert!(col0 > absmax(c));
        }
    }
}

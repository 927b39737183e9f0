//! Deterministic simulation of the INT4 x FP8 linear-layer kernel: table
//! dequantization of INT4 weights to FP8, FP8 x FP8 products accumulated
//! in FP32 in a fixed ascending-k order, per-row activation scale and
//! power-of-two fold applied once after accumulation, and an FP32
//! epilogue (activation function, gating multiply, residual add) with a
//! single final BF16 encode.
//!
//! Products of two FP8 values are exact in f32 (short mantissas), so the
//! only rounding inside the reduction is the FP32 addition itself, which
//! makes outputs bit-reproducible for a fixed reduction order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Bf16;
use crate::quant::{build_dequant_lut, Fp8ActivationRow, GroupScale, QuantizedWeight, ScaleFormat};

/// Nonlinear activation applied in the epilogue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Silu,
    Relu,
}

/// Output storage format of the kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Bf16,
    Fp32,
}

/// Post-GEMM elementwise stage. Applied in FP32 in this order:
/// activation function, then the gating multiply, then the residual add.
#[derive(Clone, Debug, Default)]
pub struct EpilogueSpec {
    pub activation: Activation,
    /// Elementwise multiplier (the gate path of a gated FFN).
    pub elementwise_multiplier: Option<Array2<f64>>,
    pub residual: Option<Array2<f64>>,
    pub output_format: OutputFormat,
}

impl EpilogueSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn fp32() -> Self {
        Self {
            output_format: OutputFormat::Fp32,
            ..Self::default()
        }
    }
}

/// Operation counters for one kernel invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmTrace {
    /// FP8 x FP8 multiply-accumulates: `b * n_out * n_in`.
    pub multiplies: u64,
    /// Table lookups converting INT4 codes to FP8: `n_out * n_in` for
    /// FP8 group scales (weights are converted once and reused across the
    /// batch), zero for the BF16-scale variant.
    pub lut_lookups: u64,
}

/// Dequantization cost of one linear layer in scalar ops: `n_out * n_in`
/// weight conversions plus `b * n_out` output scale multiplies, i.e.
/// `(b + n_in) * n_out`.
pub fn dequant_cost_ops(batch: usize, d_in: usize, d_out: usize) -> u64 {
    (batch as u64 + d_in as u64) * d_out as u64
}

/// `x * sigmoid(x)` evaluated in FP32.
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Full-precision reference `Y = X W^T` with a fixed ascending-k
/// reduction order.
pub fn reference_gemm(x: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    let (b, k) = x.dim();
    let (n_out, k2) = w.dim();
    if k != k2 {
        return Err(Error::DimensionMismatch(format!(
            "inner dimensions disagree: {k} vs {k2}"
        )));
    }
    let mut out = Array2::zeros((b, n_out));
    for r in 0..b {
        for o in 0..n_out {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += x[[r, kk]] * w[[o, kk]];
            }
            out[[r, o]] = acc;
        }
    }
    Ok(out)
}

/// The simulated kernel: FP8 activation rows times an INT4-quantized
/// weight. Per output element, the FP32 accumulator runs over k in
/// ascending order; the row scale and `2^-n` fold multiply the finished
/// sum; the epilogue runs in FP32 and the result is encoded per the
/// output format.
pub fn int4fp8_gemm(
    act: &[Fp8ActivationRow],
    w: &QuantizedWeight,
    epilogue: &EpilogueSpec,
) -> Result<(Array2<f64>, GemmTrace)> {
    let b = act.len();
    let (n_out, n_in) = w.shape;
    for (i, row) in act.iter().enumerate() {
        if row.codes.len() != n_in {
            return Err(Error::DimensionMismatch(format!(
                "activation row {i} has {} codes, weight expects {n_in}",
                row.codes.len()
            )));
        }
    }
    for (name, operand) in [
        ("elementwise multiplier", &epilogue.elementwise_multiplier),
        ("residual", &epilogue.residual),
    ] {
        if let Some(m) = operand {
            if m.dim() != (b, n_out) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {:?}, output is ({b}, {n_out})",
                    m.dim()
                )));
            }
        }
    }

    // Weights convert to FP8 once (in registers, in the real kernel) and
    // are reused across the whole batch.
    let mut wdq = vec![0.0f32; n_out * n_in];
    let mut lut_lookups = 0u64;
    let groups_per_row = w.groups_per_row();
    for r in 0..n_out {
        for g in 0..groups_per_row {
            let group = w.group(r, g);
            let base = r * n_in + g * w.group_size;
            match group.scale {
                GroupScale::Fp8(scale) => {
                    let lut = build_dequant_lut(scale);
                    for (i, &c) in group.codes.iter().enumerate() {
                        wdq[base + i] = lut[(c as i32 + 8) as usize].to_f64() as f32;
                        lut_lookups += 1;
                    }
                }
                GroupScale::Bf16(scale) => {
                    let sigma = scale.to_f64();
                    for (i, &c) in group.codes.iter().enumerate() {
                        wdq[base + i] = (c as f64 * sigma) as f32;
                    }
                }
            }
        }
    }

    let inv_pts = 2f32.powi(-(w.pts_exponent as i32));
    let mut out = Array2::zeros((b, n_out));
    for (r, row) in act.iter().enumerate() {
        let a: Vec<f32> = row.codes.iter().map(|c| c.to_f64() as f32).collect();
        let beta = row.scale_beta.to_f64() as f32;
        for o in 0..n_out {
            let wrow = &wdq[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0f32;
            for kk in 0..n_in {
                acc += a[kk] * wrow[kk];
            }
            acc *= beta;
            acc *= inv_pts;
            acc = match epilogue.activation {
                Activation::None => acc,
                Activation::Silu => silu(acc),
                Activation::Relu => acc.max(0.0),
            };
            if let Some(m) = &epilogue.elementwise_multiplier {
                acc *= m[[r, o]] as f32;
            }
            if let Some(res) = &epilogue.residual {
                acc += res[[r, o]] as f32;
            }
            out[[r, o]] = match epilogue.output_format {
                OutputFormat::Bf16 => Bf16::from_f64(acc as f64).to_f64(),
                OutputFormat::Fp32 => acc as f64,
            };
        }
    }
    let trace = GemmTrace {
        multiplies: (b * n_out * n_in) as u64,
        lut_lookups,
    };
    Ok((out, trace))
}

/// Convenience: gemm against the BF16-scale variant counts no lookups.
pub fn scale_format_of(w: &QuantizedWeight) -> ScaleFormat {
    w.groups
        .first()
        .map(|g| g.scale.format())
        .unwrap_or(ScaleFormat::Fp8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fp8_quantize_activation_row, quantize_weight, ScaleFormat};
    use crate::smoothing::SmoothingRecipe;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn quantize_rows(x: &Array2<f64>) -> Vec<Fp8ActivationRow> {
        (0..x.nrows())
            .map(|r| fp8_quantize_activation_row(&x.row(r).to_vec()))
            .collect()
    }

    #[test]
    fn reference_gemm_identity() {
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64);
        let eye = Array2::from_shape_fn((4, 4), |(r, c)| if r == c { 1.0 } else { 0.0 });
        assert_eq!(reference_gemm(&x, &eye).unwrap(), x);
    }

    #[test]
    fn reference_gemm_scalar() {
        let x = Array2::from_elem((1, 1), 3.0);
        let w = Array2::from_elem((1, 1), -2.0);
        assert_eq!(reference_gemm(&x, &w).unwrap()[[0, 0]], -6.0);
    }

    #[test]
    fn reference_gemm_matches_reversed_order_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((8, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let w = Array2::from_shape_fn((12, 16), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let got = reference_gemm(&x, &w).unwrap();
        for r in 0..8 {
            for o in 0..12 {
                let mut acc = 0.0;
                for kk in (0..16).rev() {
                    acc += x[[r, kk]] * w[[o, kk]];
                }
                assert!((got[[r, o]] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(30.0) - 30.0).abs() < 1e-5);
        // High-precision f64 evaluation as oracle.
        let want = -1.0f64 / (1.0 + 1.0f64.exp());
        assert!((silu(-1.0) as f64 - want).abs() < 1e-7);
        assert_eq!(silu(f32::MIN_EXP as f32 * 100.0), -0.0); // deep negative tail
    }

    #[test]
    fn on_grid_problem_is_exact() {
        // Activations with row max 448 (beta = 1) and integer weights with
        // group max 7 (sigma = 1): every quantity is on-grid and the f32
        // accumulation of two terms is exact.
        let mut x = Array2::zeros((1, 128));
        x[[0, 0]] = 448.0;
        x[[0, 1]] = -32.0;
        let mut w = Array2::zeros((2, 128));
        w[[0, 0]] = 7.0;
        w[[0, 1]] = 1.0;
        w[[1, 1]] = 7.0;
        let recipe = SmoothingRecipe::neutral(128, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Fp8).unwrap();
        let (out, trace) =
            int4fp8_gemm(&quantize_rows(&x), &qw, &EpilogueSpec::fp32()).unwrap();
        assert_eq!(out[[0, 0]], 448.0 * 7.0 - 32.0);
        assert_eq!(out[[0, 1]], -32.0 * 7.0);
        assert_eq!(trace.multiplies, 2 * 128);
        assert_eq!(trace.lut_lookups, 2 * 128);
    }

    #[test]
    fn zero_scale_groups_contribute_nothing() {
        // First group of the row underflows to a zero scale; the second
        // is well-scaled. The output must equal the second group's exact
        // contribution.
        let mut x = Array2::zeros((1, 256));
        x[[0, 5]] = 448.0; // lands in group 0
        x[[0, 130]] = 448.0; // lands in group 1
        let mut w = Array2::zeros((1, 256));
        w[[0, 5]] = 1e-3; // whole group 0 below the underflow threshold
        w[[0, 130]] = 7.0;
        let recipe = SmoothingRecipe::neutral(256, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Fp8).unwrap();
        assert_eq!(qw.groups[0].scale.decode(), 0.0);
        let (out, _) = int4fp8_gemm(&quantize_rows(&x), &qw, &EpilogueSpec::fp32()).unwrap();
        assert_eq!(out[[0, 0]], 448.0 * 7.0);
    }

    #[test]
    fn matches_dequantize_then_matmul_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((64, 128), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let w = Array2::from_shape_fn((64, 128), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let recipe = SmoothingRecipe::neutral(128, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Fp8).unwrap();
        let act = quantize_rows(&x);
        let (out, _) = int4fp8_gemm(&act, &qw, &EpilogueSpec::fp32()).unwrap();

        // Oracle: materialize the dequantized operands through the module
        // API, then run the same fixed-order f32 reduction.
        for r in 0..64 {
            let beta = act[r].scale_beta.to_f64() as f32;
            for o in 0..64 {
                let wrow: Vec<f64> = crate::quant::dequantize_group(qw.group(o, 0));
                let mut acc = 0.0f32;
                for kk in 0..128 {
                    acc += act[r].codes[kk].to_f64() as f32 * wrow[kk] as f32;
                }
                acc *= beta;
                assert_eq!(
                    (acc as f64).to_bits(),
                    out[[r, o]].to_bits(),
                    "element ({r}, {o})"
                );
            }
        }
    }

    #[test]
    fn pts_fold_is_bit_transparent_for_power_of_two_scales() {
        // Weights built from an on-grid sigma so that scaling by 2^n
        // shifts exponents only; folding 2^-n back must reproduce the
        // unscaled outputs bit-for-bit.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.25;
        let w = Array2::from_shape_fn((8, 128), |_| {
            (rng.gen_range(-7i32..=7) as f64) * sigma
        });
        let x = Array2::from_shape_fn((4, 128), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let act = quantize_rows(&x);

        let base = SmoothingRecipe::neutral(128, "test");
        let plain = quantize_weight(&w, 128, &base, ScaleFormat::Fp8).unwrap();

        let mut scaled_recipe = base.clone();
        scaled_recipe.pts.exponent = 3;
        let scaled =
            quantize_weight(&w.mapv(|v| v * 8.0), 128, &scaled_recipe, ScaleFormat::Fp8).unwrap();
        assert_eq!(scaled.pts_exponent, 3);

        let (a, _) = int4fp8_gemm(&act, &plain, &EpilogueSpec::fp32()).unwrap();
        let (b, _) = int4fp8_gemm(&act, &scaled, &EpilogueSpec::fp32()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn epilogue_order_activation_multiply_residual() {
        let mut x = Array2::zeros((1, 128));
        x[[0, 0]] = 448.0;
        let mut w = Array2::zeros((1, 128));
        w[[0, 0]] = 7.0;
        let recipe = SmoothingRecipe::neutral(128, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Fp8).unwrap();
        let epi = EpilogueSpec {
            activation: Activation::Relu,
            elementwise_multiplier: Some(Array2::from_elem((1, 1), -2.0)),
            residual: Some(Array2::from_elem((1, 1), 5.0)),
            output_format: OutputFormat::Fp32,
        };
        let (out, _) = int4fp8_gemm(&quantize_rows(&x), &qw, &epi).unwrap();
        // relu(3136) * -2 + 5
        assert_eq!(out[[0, 0]], 3136.0 * -2.0 + 5.0);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let x = Array2::zeros((2, 128));
        let w = Array2::zeros((4, 128));
        let recipe = SmoothingRecipe::neutral(128, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Fp8).unwrap();
        let act = quantize_rows(&x);

        let bad_epi = EpilogueSpec {
            residual: Some(Array2::zeros((1, 1))),
            ..EpilogueSpec::fp32()
        };
        assert!(int4fp8_gemm(&act, &qw, &bad_epi).is_err());

        let short_act = quantize_rows(&Array2::zeros((2, 64)));
        assert!(int4fp8_gemm(&short_act, &qw, &EpilogueSpec::fp32()).is_err());
    }

    #[test]
    fn dequant_cost_formula() {
        assert_eq!(dequant_cost_ops(16, 4096, 4096), 16_842_752);
        assert_eq!(dequant_cost_ops(1, 1, 1), 2);
    }

    #[test]
    fn bf16_scale_variant_counts_no_lookups() {
        let w = Array2::from_elem((2, 128), 0.5);
        let recipe = SmoothingRecipe::neutral(128, "test");
        let qw = quantize_weight(&w, 128, &recipe, ScaleFormat::Bf16).unwrap();
        let x = Array2::from_elem((1, 128), 1.0);
        let (_, trace) = int4fp8_gemm(&quantize_rows(&x), &qw, &EpilogueSpec::fp32()).unwrap();
        assert_eq!(trace.lut_lookups, 0);
        assert_eq!(trace.multiplies, 2 * 128);
    }
}

//! Deterministic simulation of the pipelined prefill attention: online
//! softmax over key/value column tiles with a configurable precision
//! policy, plus a full-precision reference oracle.
//!
//! The real kernel overlaps three stages (score tile, softmax, value
//! aggregation) across warpgroups; its numerics are fully determined by
//! the commit/wait order, which is a strict ascending tile order per
//! query block. The simulation runs that order sequentially, so outputs
//! are bit-reproducible for a fixed schedule. Per tile: scores accumulate
//! in the score format, running max and the rescale exponential evaluate
//! in the rowmax format, probabilities encode to the P format (optionally
//! pre-scaled) before the value product, and the value product, running
//! sum, and output accumulate in FP32. `exact_mode` bypasses every
//! format rounding and runs the identical dataflow in f64, which isolates
//! the online-softmax algebra from precision effects.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Fp8E4M3, ScalarFormat};

/// Storage/rounding choices for each stage of the tiled attention.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    /// Score tiles and the softmax numerator.
    pub score_format: ScalarFormat,
    /// Running max and the rescale exponential.
    pub rowmax_format: ScalarFormat,
    /// Probabilities entering the value product.
    pub p_format: ScalarFormat,
    /// Optional pre-scale applied before encoding P; divided back out of
    /// the FP32 accumulator.
    pub p_scale: f64,
    /// Final output encode.
    pub output_format: ScalarFormat,
    /// Run the identical dataflow in f64 with no format rounding and
    /// `p_scale = 1`, isolating the online-softmax algebra.
    pub exact_mode: bool,
}

impl PrecisionPolicy {
    /// All format rounding disabled; pure f64 dataflow.
    pub fn exact() -> Self {
        Self {
            score_format: ScalarFormat::Fp32,
            rowmax_format: ScalarFormat::Fp32,
            p_format: ScalarFormat::Fp32,
            p_scale: 1.0,
            output_format: ScalarFormat::Fp32,
            exact_mode: true,
        }
    }

    /// The simulated kernel's mixed policy: FP16 scores and running max,
    /// FP8 probabilities, FP32 accumulation, BF16 outputs.
    pub fn mixed() -> Self {
        Self {
            score_format: ScalarFormat::Fp16,
            rowmax_format: ScalarFormat::Fp16,
            p_format: ScalarFormat::Fp8E4M3,
            p_scale: 1.0,
            output_format: ScalarFormat::Bf16,
            exact_mode: false,
        }
    }

    /// FP32 pipeline with real f32 rounding (not exact f64); useful for
    /// isolating the effect of narrower score formats.
    pub fn fp32() -> Self {
        Self {
            exact_mode: false,
            ..Self::exact()
        }
    }

    fn round(&self, fmt: ScalarFormat, x: f64) -> f64 {
        if self.exact_mode {
            x
        } else {
            fmt.round(x)
        }
    }

    /// FP32 accumulator step (identity in exact mode).
    fn accum(&self, x: f64) -> f64 {
        if self.exact_mode {
            x
        } else {
            x as f32 as f64
        }
    }

    fn mask_value(&self) -> f64 {
        if self.exact_mode {
            f64::NEG_INFINITY
        } else {
            self.score_format.most_negative()
        }
    }

    fn effective_p_scale(&self) -> f64 {
        if self.exact_mode {
            1.0
        } else {
            self.p_scale
        }
    }
}

/// Tiling of the key/value sequence and the score scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TileSchedule {
    /// Query block rows processed together.
    pub block_rows: usize,
    /// Key/value columns per tile.
    pub block_cols: usize,
    pub causal: bool,
    /// Score scale; `None` selects `1/sqrt(d)`.
    pub tau: Option<f64>,
}

impl TileSchedule {
    pub fn new(block_rows: usize, block_cols: usize, causal: bool) -> Self {
        Self {
            block_rows,
            block_cols,
            causal,
            tau: None,
        }
    }

    pub fn tile_count(&self, n: usize) -> usize {
        n.div_ceil(self.block_cols)
    }

    fn resolve_tau(&self, d: usize) -> f64 {
        self.tau.unwrap_or(1.0 / (d as f64).sqrt())
    }
}

/// Running state for one query block: per-row max `m`, normalizer `l`,
/// rescale `s`, and the FP32 output accumulator.
#[derive(Clone, Debug)]
pub struct TiledAttentionState {
    pub m: Vec<f64>,
    pub l: Vec<f64>,
    pub s: Vec<f64>,
    pub o: Array2<f64>,
}

impl TiledAttentionState {
    fn new(rows: usize, d: usize) -> Self {
        Self {
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
            s: vec![1.0; rows],
            o: Array2::zeros((rows, d)),
        }
    }
}

/// Per-tile snapshot of the running statistics, for debugging dumps.
#[derive(Clone, Debug, Serialize)]
pub struct TileTrace {
    pub query_block: usize,
    pub tile: usize,
    pub m: Vec<f64>,
    pub l: Vec<f64>,
}

/// Full-precision attention oracle: `S = tau Q K^T`, causal mask to
/// negative infinity, row softmax, `O = P V`, all in f64 with fixed
/// reduction orders.
pub fn reference_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    causal: bool,
    tau: Option<f64>,
) -> Result<Array2<f64>> {
    let (n, d) = q.dim();
    check_shapes(q, k, v)?;
    let tau = tau.unwrap_or(1.0 / (d as f64).sqrt());
    let n_keys = k.nrows();
    let d_v = v.ncols();
    let mut out = Array2::zeros((n, d_v));
    for r in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; n_keys];
        let mut m = f64::NEG_INFINITY;
        for c in 0..n_keys {
            if causal && c > r {
                continue;
            }
            let mut acc = 0.0;
            for kk in 0..d {
                acc += q[[r, kk]] * k[[c, kk]];
            }
            scores[c] = tau * acc;
            m = m.max(scores[c]);
        }
        let mut l = 0.0;
        let mut p = vec![0.0; n_keys];
        for c in 0..n_keys {
            if scores[c] > f64::NEG_INFINITY {
                p[c] = (scores[c] - m).exp();
                l += p[c];
            }
        }
        for col in 0..d_v {
            let mut acc = 0.0;
            for c in 0..n_keys {
                acc += p[c] * v[[c, col]];
            }
            out[[r, col]] = acc / l;
        }
    }
    Ok(out)
}

/// Encode one probability tile per the policy: values (in `[0, 1]`)
/// multiplied by the P pre-scale and rounded to the P format. The value
/// product divides the pre-scale back out of its accumulator.
pub fn quantize_p_tile(p_tile: &Array2<f64>, policy: &PrecisionPolicy) -> Array2<f64> {
    p_tile.mapv(|p| quantize_p_value(p, policy))
}

fn quantize_p_value(p: f64, policy: &PrecisionPolicy) -> f64 {
    if policy.exact_mode {
        return p;
    }
    let scaled = p * policy.effective_p_scale();
    match policy.p_format {
        ScalarFormat::Fp8E4M3 => Fp8E4M3::from_f64(scaled).to_f64(),
        fmt => fmt.round(scaled),
    }
}

/// Online-softmax tiled attention under the precision policy.
pub fn tiled_attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    schedule: &TileSchedule,
    policy: &PrecisionPolicy,
) -> Result<Array2<f64>> {
    run_tiled(q, k, v, schedule, policy, None)
}

/// As [`tiled_attention_forward`], also returning per-tile snapshots of
/// the running statistics.
pub fn tiled_attention_with_trace(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    schedule: &TileSchedule,
    policy: &PrecisionPolicy,
) -> Result<(Array2<f64>, Vec<TileTrace>)> {
    let mut traces = Vec::new();
    let out = run_tiled(q, k, v, schedule, policy, Some(&mut traces))?;
    Ok((out, traces))
}

fn check_shapes(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    let (_, d) = q.dim();
    let (nk, dk) = k.dim();
    let (nv, _) = v.dim();
    if dk != d {
        return Err(Error::DimensionMismatch(format!(
            "query dim {d} vs key dim {dk}"
        )));
    }
    if nk != nv {
        return Err(Error::DimensionMismatch(format!(
            "{nk} keys vs {nv} values"
        )));
    }
    Ok(())
}

fn run_tiled(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    schedule: &TileSchedule,
    policy: &PrecisionPolicy,
    mut traces: Option<&mut Vec<TileTrace>>,
) -> Result<Array2<f64>> {
    let (n, d) = q.dim();
    check_shapes(q, k, v)?;
    if schedule.block_rows == 0 || schedule.block_cols == 0 {
        return Err(Error::InvalidConfig("tile sizes must be positive".into()));
    }
    let n_keys = k.nrows();
    let d_v = v.ncols();
    let tau = schedule.resolve_tau(d);
    let t_c = schedule.tile_count(n_keys);
    let p_scale = policy.effective_p_scale();
    let mask_value = policy.mask_value();

    let mut out = Array2::zeros((n, d_v));
    let mut block_index = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + schedule.block_rows).min(n);
        let rows = end - start;
        let mut state = TiledAttentionState::new(rows, d_v);

        for tile in 0..t_c {
            let cstart = tile * schedule.block_cols;
            let cend = (cstart + schedule.block_cols).min(n_keys);
            let width = cend - cstart;

            // Stage 1: score tile in the score format, then mask(tau * S).
            let mut s_tile = Array2::from_elem((rows, width), mask_value);
            for r in 0..rows {
                for c in 0..width {
                    if schedule.causal && cstart + c > start + r {
                        continue;
                    }
                    let mut acc = 0.0;
                    for kk in 0..d {
                        acc = policy
                            .round(policy.score_format, acc + q[[start + r, kk]] * k[[cstart + c, kk]]);
                    }
                    s_tile[[r, c]] = policy.round(policy.score_format, tau * acc);
                }
            }

            // Stage 2: running max, rescale, probabilities, running sum.
            let mut p_tile = Array2::zeros((rows, width));
            for r in 0..rows {
                let mut row_max = f64::NEG_INFINITY;
                for c in 0..width {
                    row_max = row_max.max(s_tile[[r, c]]);
                }
                let m_new = policy.round(policy.rowmax_format, state.m[r].max(row_max));
                let diff = policy.round(policy.rowmax_format, state.m[r] - m_new);
                let rescale = policy.accum(policy.round(policy.rowmax_format, diff.exp()));
                state.m[r] = m_new;
                state.s[r] = rescale;

                let mut row_sum = 0.0;
                for c in 0..width {
                    let e = policy.round(policy.score_format, s_tile[[r, c]] - m_new);
                    let p = policy.round(policy.score_format, e.exp());
                    // Fully-masked entries carry the mask value; their
                    // exponential underflows to exactly zero.
                    let p = if s_tile[[r, c]] == mask_value { 0.0 } else { p };
                    p_tile[[r, c]] = p;
                    row_sum = policy.accum(row_sum + p);
                }
                state.l[r] = policy.accum(policy.accum(rescale * state.l[r]) + row_sum);
            }

            // Stage 3: encode P, multiply the value tile, rescale + add
            // into the FP32 accumulator.
            for r in 0..rows {
                for col in 0..d_v {
                    let mut pv = 0.0;
                    for c in 0..width {
                        let p_enc = quantize_p_value(p_tile[[r, c]], policy);
                        let vv = policy.accum(v[[cstart + c, col]]);
                        pv = policy.accum(pv + p_enc * vv);
                    }
                    pv = policy.accum(pv / p_scale);
                    state.o[[r, col]] =
                        policy.accum(policy.accum(state.s[r] * state.o[[r, col]]) + pv);
                }
            }

            if let Some(traces) = traces.as_deref_mut() {
                traces.push(TileTrace {
                    query_block: block_index,
                    tile,
                    m: state.m.clone(),
                    l: state.l.clone(),
                });
            }
        }

        // Final normalization and output encode.
        for r in 0..rows {
            for col in 0..d_v {
                let normalized = policy.accum(state.o[[r, col]] / state.l[r]);
                out[[start + r, col]] = policy.round(policy.output_format, normalized);
            }
        }
        start = end;
        block_index += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_queries_give_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Array2::zeros((4, 8));
        let k = random_matrix(&mut rng, 6, 8);
        let v = random_matrix(&mut rng, 6, 8);
        let out = reference_attention(&q, &k, &v, false, None).unwrap();
        for r in 0..4 {
            for col in 0..8 {
                let mean: f64 = (0..6).map(|c| v[[c, col]]).sum::<f64>() / 6.0;
                assert!((out[[r, col]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_matrix(&mut rng, 1, 8);
        let k = random_matrix(&mut rng, 1, 8);
        let v = random_matrix(&mut rng, 1, 8);
        let out = reference_attention(&q, &k, &v, true, None).unwrap();
        for col in 0..8 {
            assert!((out[[0, col]] - v[[0, col]]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_two_rows_with_zero_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Array2::zeros((2, 4));
        let k = random_matrix(&mut rng, 2, 4);
        let v = random_matrix(&mut rng, 2, 4);
        let out = reference_attention(&q, &k, &v, true, None).unwrap();
        for col in 0..4 {
            assert!((out[[0, col]] - v[[0, col]]).abs() < 1e-12);
            assert!((out[[1, col]] - (v[[0, col]] + v[[1, col]]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_single_tile_equals_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &causal in &[false, true] {
            let q = random_matrix(&mut rng, 32, 16);
            let k = random_matrix(&mut rng, 32, 16);
            let v = random_matrix(&mut rng, 32, 16);
            let schedule = TileSchedule::new(8, 32, causal);
            let tiled =
                tiled_attention_forward(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).unwrap();
            let reference = reference_attention(&q, &k, &v, causal, None).unwrap();
            let diff = max_abs_diff(&tiled, &reference);
            assert!(diff <= 1e-12, "causal={causal}: diff {diff}");
        }
    }

    #[test]
    fn exact_multi_tile_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_matrix(&mut rng, 256, 64);
        let k = random_matrix(&mut rng, 256, 64);
        let v = random_matrix(&mut rng, 256, 64);
        let schedule = TileSchedule::new(64, 64, true);
        let tiled =
            tiled_attention_forward(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).unwrap();
        let reference = reference_attention(&q, &k, &v, true, None).unwrap();
        assert!(max_abs_diff(&tiled, &reference) <= 1e-5);
    }

    #[test]
    fn tile_sizes_do_not_change_exact_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 96;
        let q = random_matrix(&mut rng, n, 32);
        let k = random_matrix(&mut rng, n, 32);
        let v = random_matrix(&mut rng, n, 32);
        let outputs: Vec<Array2<f64>> = [16, 32, 64, n, n + 17]
            .iter()
            .map(|&bc| {
                let schedule = TileSchedule::new(32, bc, true);
                tiled_attention_forward(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).unwrap()
            })
            .collect();
        for pair in outputs.windows(2) {
            assert!(max_abs_diff(&pair[0], &pair[1]) <= 1e-5);
        }
    }

    #[test]
    fn running_max_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_matrix(&mut rng, 64, 32);
        let k = random_matrix(&mut rng, 64, 32);
        let v = random_matrix(&mut rng, 64, 32);
        let schedule = TileSchedule::new(16, 16, true);
        for policy in [PrecisionPolicy::exact(), PrecisionPolicy::mixed()] {
            let (_, traces) =
                tiled_attention_with_trace(&q, &k, &v, &schedule, &policy).unwrap();
            let mut last: std::collections::HashMap<usize, Vec<f64>> = Default::default();
            for t in &traces {
                if let Some(prev) = last.get(&t.query_block) {
                    for (a, b) in prev.iter().zip(&t.m) {
                        assert!(b >= a, "running max decreased: {a} -> {b}");
                    }
                }
                last.insert(t.query_block, t.m.clone());
            }
        }
    }

    #[test]
    fn exact_normalizer_matches_reference_softmax_denominator() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 48;
        let q = random_matrix(&mut rng, n, 16);
        let k = random_matrix(&mut rng, n, 16);
        let v = random_matrix(&mut rng, n, 16);
        let schedule = TileSchedule::new(n, 16, false);
        let (_, traces) =
            tiled_attention_with_trace(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).unwrap();
        let last = traces.last().unwrap();
        let tau = 1.0 / 4.0;
        for r in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|c| {
                    let mut acc = 0.0;
                    for kk in 0..16 {
                        acc += q[[r, kk]] * k[[c, kk]];
                    }
                    tau * acc
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let want: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            assert!((last.l[r] - want).abs() <= 1e-6 * want);
        }
    }

    #[test]
    fn p_tile_quantization_examples() {
        let mixed = PrecisionPolicy::mixed();
        let p = Array2::from_elem((1, 1), 1.0);
        assert_eq!(quantize_p_tile(&p, &mixed)[[0, 0]], 1.0);

        // Below 2^-10: rounds to zero or the smallest subnormal.
        let tiny = Array2::from_elem((1, 1), 2f64.powi(-11));
        let enc = quantize_p_tile(&tiny, &mixed)[[0, 0]];
        assert!(enc == 0.0 || enc == 2f64.powi(-9));

        // Pre-scale 448 maps 1.0 onto the FP8 maximum; the accumulator
        // compensation restores it within FP32 rounding.
        let mut scaled = mixed;
        scaled.p_scale = 448.0;
        let enc = quantize_p_tile(&p, &scaled)[[0, 0]];
        assert_eq!(enc, 448.0);
        let restored = (enc as f32 / 448.0f32) as f64;
        assert!((restored - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degradation_is_monotone_in_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut errs: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..15 {
            let q = random_matrix(&mut rng, 64, 32);
            let k = random_matrix(&mut rng, 64, 32);
            let v = random_matrix(&mut rng, 64, 32);
            let schedule = TileSchedule::new(32, 32, true);
            let reference = reference_attention(&q, &k, &v, true, None).unwrap();

            let mut fp16_scores = PrecisionPolicy::fp32();
            fp16_scores.score_format = ScalarFormat::Fp16;
            fp16_scores.rowmax_format = ScalarFormat::Fp16;

            for (i, policy) in [
                PrecisionPolicy::exact(),
                fp16_scores,
                PrecisionPolicy::mixed(),
            ]
            .iter()
            .enumerate()
            {
                let out = tiled_attention_forward(&q, &k, &v, &schedule, policy).unwrap();
                let num: f64 = out
                    .iter()
                    .zip(reference.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                let den: f64 = reference.iter().map(|b| b.powi(2)).sum();
                errs[i].push((num / den).sqrt());
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let m0 = median(&mut errs[0]);
        let m1 = median(&mut errs[1]);
        let m2 = median(&mut errs[2]);
        assert!(m0 <= m1 && m1 <= m2, "medians not monotone: {m0} {m1} {m2}");
    }

    #[test]
    fn oversized_tile_is_a_single_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random_matrix(&mut rng, 8, 16);
        let k = random_matrix(&mut rng, 8, 16);
        let v = random_matrix(&mut rng, 8, 16);
        let schedule = TileSchedule::new(8, 1024, false);
        assert_eq!(schedule.tile_count(8), 1);
        let out =
            tiled_attention_forward(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).unwrap();
        let reference = reference_attention(&q, &k, &v, false, None).unwrap();
        assert!(max_abs_diff(&out, &reference) <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = Array2::zeros((4, 8));
        let k = Array2::zeros((4, 6));
        let v = Array2::zeros((4, 8));
        assert!(reference_attention(&q, &k, &v, false, None).is_err());
        let schedule = TileSchedule::new(4, 4, false);
        assert!(
            tiled_attention_forward(&q, &k, &v, &schedule, &PrecisionPolicy::exact()).is_err()
        );
    }
}

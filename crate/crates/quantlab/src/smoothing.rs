//! Linear-layer outlier smoothing applied offline, before quantization:
//! channel-wise absmean scaling equalizes per-channel magnitudes, and
//! per-tensor power-of-two scaling lifts tensors whose group scales would
//! otherwise truncate to zero in FP8.
//!
//! Both transformations come with an exact inverse: the channel scales are
//! absorbed into the producing layer's weights, and the power-of-two
//! factor is divided out of the GEMM output (exact in binary floats).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FP8_MAX, FP8_SCALE_UNDERFLOW_THRESHOLD};
use crate::rope::{CrsScales, RopeConfig, RpnScales};

/// Largest exponent the per-tensor scale search will try. Far beyond any
/// FP8-relevant dynamic range; exceeding it signals a degenerate tensor.
pub const PTS_MAX_EXPONENT: u32 = 60;

/// Per-input-channel scales `lambda[i] = target / absmean(channel i)`.
/// All-zero channels get `lambda = 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CasScales {
    pub lambdas: Vec<f64>,
    pub target_absmean: f64,
}

impl CasScales {
    /// Identity scales for `channels` input channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            lambdas: vec![1.0; channels],
            target_absmean: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.lambdas.iter().all(|&l| l == 1.0)
    }

    fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(
                "channel scales must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Target absmean selection for [`compute_cas`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CasTarget {
    /// Arithmetic mean of the per-channel absmeans (keeps the overall
    /// tensor scale roughly unchanged).
    MeanOfAbsmeans,
    Explicit(f64),
    /// All scales forced to 1 (the constant exception used where no
    /// neighboring layer can absorb the inverse).
    ConstantOne,
}

/// Per-channel absmean scales for a weight matrix laid out `(out, in)`;
/// channel `i` is column `i`.
pub fn compute_cas(w: &Array2<f64>, target: CasTarget) -> CasScales {
    let (rows, cols) = w.dim();
    if let CasTarget::ConstantOne = target {
        return CasScales::identity(cols);
    }
    let absmeans: Vec<f64> = (0..cols)
        .map(|c| {
            let mut sum = 0.0;
            for r in 0..rows {
                sum += w[[r, c]].abs();
            }
            sum / rows as f64
        })
        .collect();
    let target_absmean = match target {
        CasTarget::Explicit(v) => v,
        CasTarget::MeanOfAbsmeans => absmeans.iter().sum::<f64>() / cols as f64,
        CasTarget::ConstantOne => unreachable!(),
    };
    let lambdas = absmeans
        .iter()
        .map(|&a| if a > 0.0 { target_absmean / a } else { 1.0 })
        .collect();
    CasScales {
        lambdas,
        target_absmean,
    }
}

/// Scale input channels: column `i` of `w` multiplied by `lambda[i]`.
pub fn apply_cas(w: &Array2<f64>, cas: &CasScales) -> Result<Array2<f64>> {
    cas.validate()?;
    let (rows, cols) = w.dim();
    if cols != cas.lambdas.len() {
        return Err(Error::DimensionMismatch(format!(
            "weight has {cols} input channels, scales cover {}",
            cas.lambdas.len()
        )));
    }
    let mut out = w.clone();
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] *= cas.lambdas[c];
        }
    }
    Ok(out)
}

/// Absorb the inverse scales into the producing layer: output channel
/// (row) `i` of `prev_w` divided by `lambda[i]`, so activations arrive
/// pre-divided and the product is unchanged in exact arithmetic.
pub fn merge_inverse_cas(prev_w: &Array2<f64>, cas: &CasScales) -> Result<Array2<f64>> {
    cas.validate()?;
    let (rows, cols) = prev_w.dim();
    if rows != cas.lambdas.len() {
        return Err(Error::DimensionMismatch(format!(
            "previous layer has {rows} output channels, scales cover {}",
            cas.lambdas.len()
        )));
    }
    let mut out = prev_w.clone();
    for r in 0..rows {
        let inv = 1.0 / cas.lambdas[r];
        for c in 0..cols {
            out[[r, c]] *= inv;
        }
    }
    Ok(out)
}

/// Why the per-tensor scale search stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtsStopReason {
    /// Doubling further no longer reduces the underflow score.
    UnderflowStable,
    /// Some element sits one doubling away from the FP8 overflow
    /// threshold.
    OverflowRisk,
}

/// Result of the minimal power-of-two scale search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PtsResult {
    pub exponent: u32,
    pub stop_reason: PtsStopReason,
    /// Underflow scores at each tried exponent, `score_trace[k] =
    /// S(W * 2^k)` for `k = 0..=exponent`. Non-increasing.
    pub score_trace: Vec<f64>,
}

impl PtsResult {
    pub fn identity() -> Self {
        Self {
            exponent: 0,
            stop_reason: PtsStopReason::UnderflowStable,
            score_trace: Vec::new(),
        }
    }
}

/// Cumulative underflow score: `sum over elements of
/// max(0, 7*2^-9 - |w|)`. Summed left-to-right in row-major order so the
/// result is bit-reproducible.
pub fn underflow_score(w: &Array2<f64>) -> f64 {
    scaled_underflow_score(w, 1.0)
}

fn scaled_underflow_score(w: &Array2<f64>, factor: f64) -> f64 {
    let mut sum = 0.0f64;
    for &v in w.iter() {
        sum += (FP8_SCALE_UNDERFLOW_THRESHOLD - (v * factor).abs()).max(0.0);
    }
    sum
}

/// Does any element land in the overflow-risk band `[7*2^(5-n),
/// 7*2^(6-n))`, i.e. within one further doubling of the FP8 maximum?
fn overflow_risk_at(w: &Array2<f64>, n: u32) -> bool {
    let factor = 2f64.powi(-(n as i32));
    let lo = 0.5 * FP8_MAX * factor;
    let hi = FP8_MAX * factor;
    w.iter().any(|&v| {
        let a = v.abs();
        a >= lo && a < hi
    })
}

/// Minimal non-negative exponent `n` such that either some element hits
/// the overflow-risk band, or the underflow score is stable
/// (`S(W*2^n) = S(W*2^(n+1))`, checked at the single doubling: every
/// nonzero below-threshold element strictly reduces the score when
/// doubled, so one equality implies all). The overflow check takes
/// precedence, so an underflow-stable result guarantees no element sits
/// in the band at the returned exponent.
pub fn compute_pts_exponent(w: &Array2<f64>) -> Result<PtsResult> {
    let mut score_trace = Vec::new();
    let mut score = scaled_underflow_score(w, 1.0);
    for n in 0..=PTS_MAX_EXPONENT {
        score_trace.push(score);
        if overflow_risk_at(w, n) {
            return Ok(PtsResult {
                exponent: n,
                stop_reason: PtsStopReason::OverflowRisk,
                score_trace,
            });
        }
        let next = scaled_underflow_score(w, 2f64.powi(n as i32 + 1));
        if score == next {
            return Ok(PtsResult {
                exponent: n,
                stop_reason: PtsStopReason::UnderflowStable,
                score_trace,
            });
        }
        score = next;
    }
    Err(Error::DegenerateTensor(PTS_MAX_EXPONENT))
}

/// Multiply every element by `2^n` (exact).
pub fn apply_pts(w: &Array2<f64>, exponent: u32) -> Array2<f64> {
    let factor = 2f64.powi(exponent as i32);
    w.mapv(|v| v * factor)
}

/// Divide a GEMM output by `2^n` (exact).
pub fn fold_inverse_pts(y: &Array2<f64>, exponent: u32) -> Array2<f64> {
    let factor = 2f64.powi(-(exponent as i32));
    y.mapv(|v| v * factor)
}

/// Fraction of quantization groups (contiguous `group_size` spans of each
/// row) whose max magnitude falls below the FP8 scale-underflow
/// threshold.
pub fn underflow_group_fraction(w: &Array2<f64>, group_size: usize) -> Result<f64> {
    let (rows, cols) = w.dim();
    if group_size == 0 || cols % group_size != 0 {
        return Err(Error::NotDivisible {
            what: "input channels",
            len: cols,
            group_size,
        });
    }
    let groups_per_row = cols / group_size;
    let mut tiny = 0usize;
    for r in 0..rows {
        for g in 0..groups_per_row {
            let mut max_abs = 0.0f64;
            for c in g * group_size..(g + 1) * group_size {
                max_abs = max_abs.max(w[[r, c]].abs());
            }
            if max_abs < FP8_SCALE_UNDERFLOW_THRESHOLD {
                tiny += 1;
            }
        }
    }
    Ok(tiny as f64 / (rows * groups_per_row) as f64)
}

/// Everything needed to reproduce one layer's offline smoothing: the
/// channel scales, the power-of-two exponent, and (for attention-adjacent
/// projections) the per-head pair and outlier-channel scales.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmoothingRecipe {
    pub cas: CasScales,
    pub pts: PtsResult,
    /// Per-head shared pair scales, when the layer sits on the key or
    /// query path.
    pub rpn: Option<Vec<RpnScales>>,
    /// Per-head outlier-channel scales, when the layer sits on the key or
    /// query path.
    pub crs: Option<Vec<CrsScales>>,
    pub rope: Option<RopeConfig>,
    /// Which layer this recipe calibrates.
    pub provenance: String,
}

impl SmoothingRecipe {
    pub fn neutral(channels: usize, provenance: impl Into<String>) -> Self {
        Self {
            cas: CasScales::identity(channels),
            pts: PtsResult::identity(),
            rpn: None,
            crs: None,
            rope: None,
            provenance: provenance.into(),
        }
    }
}

//! Rotary position embedding and the attention-side outlier smoothing it
//! requires: shared per-pair normalization computed pre-RoPE, per-channel
//! scaling of selected outlier channels applied post-RoPE, and the merge
//! algebra that keeps attention scores invariant.
//!
//! Channel `i` pairs with `i + d/2`. Pair-shared diagonal scaling commutes
//! with the rotation (both channels of a pair share one factor), which is
//! why the per-pair normalization can be folded into the key projection
//! offline. Per-channel scaling with distinct factors inside a pair does
//! not commute, so it must be applied after the rotation.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotary embedding configuration: head dimension (even) and frequency
/// base. Channel `i` pairs with `i + head_dim/2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

impl RopeConfig {
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, DEFAULT_ROPE_BASE)
    }

    pub fn with_base(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "head_dim must be positive and even, got {head_dim}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rope base must be positive, got {base}"
            )));
        }
        Ok(Self { head_dim, base })
    }

    /// Rotation angle for pair `i` at token position `t`:
    /// `t * base^(-2i/d)`.
    pub fn theta(&self, position: usize, pair: usize) -> f64 {
        position as f64 * self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }
}

/// Apply the rotary embedding to an `N x d` matrix, one token per row.
/// `positions[n]` is the token index of row `n`. Rotations are computed
/// in f64.
pub fn apply_rope(x: &Array2<f64>, positions: &[usize], cfg: &RopeConfig) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if d != cfg.head_dim {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {d} columns, rope config expects {}",
            cfg.head_dim
        )));
    }
    if positions.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} rows but {} positions",
            positions.len()
        )));
    }
    let half = d / 2;
    let mut out = x.clone();
    for (row, &t) in (0..n).zip(positions) {
        for i in 0..half {
            let (a, b) = rotate_pair(x[[row, i]], x[[row, i + half]], cfg.theta(t, i));
            out[[row, i]] = a;
            out[[row, i + half]] = b;
        }
    }
    Ok(out)
}

/// Rotate one channel pair by `theta`.
fn rotate_pair(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let (sin, cos) = theta.sin_cos();
    (a * cos - b * sin, a * sin + b * cos)
}

/// Shared per-pair key scales: `s[i]` divides both channels of pair `i`.
///
/// `s[i] = alpha * max_n ||(k_i^n, k_j^n)||_2` over the calibration
/// tokens, so every scaled pair norm is bounded by `1/alpha`; the bound
/// survives the rotation because rotations preserve pair norms. All-zero
/// pairs get `s = alpha`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RpnScales {
    pub s: Vec<f64>,
    pub alpha: f64,
}

pub const DEFAULT_RPN_ALPHA: f64 = 8.0;

impl RpnScales {
    /// Identity scales (all 1) for a head dimension.
    pub fn identity(head_dim: usize) -> Self {
        Self {
            s: vec![1.0; head_dim / 2],
            alpha: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.s.len() * 2
    }

    /// Scale shared by channel `c` (pair index `c mod d/2`).
    pub fn for_channel(&self, c: usize) -> f64 {
        self.s[c % self.s.len()]
    }
}

/// Compute shared per-pair scales from a pre-RoPE calibration key matrix.
pub fn compute_rpn(k_calib: &Array2<f64>, alpha: f64) -> Result<RpnScales> {
    let (n, d) = k_calib.dim();
    if n == 0 || d == 0 || d % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "calibration keys must be non-empty with an even column count, got {n}x{d}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let half = d / 2;
    let mut s = Vec::with_capacity(half);
    for i in 0..half {
        let mut max_norm = 0.0f64;
        for row in 0..n {
            let a = k_calib[[row, i]];
            let b = k_calib[[row, i + half]];
            max_norm = max_norm.max(a.hypot(b));
        }
        s.push(if max_norm > 0.0 { alpha * max_norm } else { alpha });
    }
    Ok(RpnScales { s, alpha })
}

/// Per-channel post-RoPE scales for the selected outlier channel pairs.
/// `t[c] = beta * max_n |k_c^n|` over post-RoPE calibration keys;
/// all-zero channels get `t = beta`. Channels outside the selected pairs
/// are untouched (factor 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrsScales {
    pub t: BTreeMap<usize, f64>,
    pub beta: f64,
    pub outlier_pairs: Vec<usize>,
}

pub const DEFAULT_CRS_BETA: f64 = 8.0;
pub const DEFAULT_OUTLIER_PAIRS: usize = 8;

impl CrsScales {
    /// No outlier channels; every factor is 1.
    pub fn identity() -> Self {
        Self {
            t: BTreeMap::new(),
            beta: 1.0,
            outlier_pairs: Vec::new(),
        }
    }

    pub fn for_channel(&self, c: usize) -> f64 {
        self.t.get(&c).copied().unwrap_or(1.0)
    }
}

/// Rank pairs by the post-RoPE max-abs over both channels and return the
/// `count` largest pair indices (ascending). Ties break toward the lower
/// pair index.
pub fn select_outlier_pairs(k_post_rope: &Array2<f64>, count: usize) -> Result<Vec<usize>> {
    let (n, d) = k_post_rope.dim();
    if d % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "key matrix column count {d} is odd"
        )));
    }
    let half = d / 2;
    if count > half {
        return Err(Error::InvalidConfig(format!(
            "requested {count} outlier pairs but only {half} pairs exist"
        )));
    }
    let mut ranked: Vec<(usize, f64)> = (0..half)
        .map(|i| {
            let mut max_abs = 0.0f64;
            for row in 0..n {
                max_abs = max_abs
                    .max(k_post_rope[[row, i]].abs())
                    .max(k_post_rope[[row, i + half]].abs());
            }
            (i, max_abs)
        })
        .collect();
    // Stable sort keeps the lower pair index first on ties.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut selected: Vec<usize> = ranked[..count].iter().map(|&(i, _)| i).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Compute per-channel scales for the selected pairs from post-RoPE
/// calibration keys.
pub fn compute_crs(
    k_post_rope: &Array2<f64>,
    outlier_pairs: &[usize],
    beta: f64,
) -> Result<CrsScales> {
    let (n, d) = k_post_rope.dim();
    if d % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "key matrix column count {d} is odd"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let half = d / 2;
    let mut t = BTreeMap::new();
    for &pair in outlier_pairs {
        if pair >= half {
            return Err(Error::DimensionMismatch(format!(
                "pair index {pair} out of range for {half} pairs"
            )));
        }
        for c in [pair, pair + half] {
            let mut max_abs = 0.0f64;
            for row in 0..n {
                max_abs = max_abs.max(k_post_rope[[row, c]].abs());
            }
            t.insert(c, if max_abs > 0.0 { beta * max_abs } else { beta });
        }
    }
    Ok(CrsScales {
        t,
        beta,
        outlier_pairs: outlier_pairs.to_vec(),
    })
}

/// Smooth raw (pre-RoPE) keys: divide channel pairs by the shared scales,
/// rotate, then divide the selected outlier channels by their factors.
pub fn smooth_keys(
    k_raw: &Array2<f64>,
    positions: &[usize],
    rpn: &RpnScales,
    crs: &CrsScales,
    cfg: &RopeConfig,
) -> Result<Array2<f64>> {
    let (n, d) = k_raw.dim();
    if d != rpn.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "keys have {d} channels, pair scales cover {}",
            rpn.head_dim()
        )));
    }
    let mut scaled = k_raw.clone();
    for row in 0..n {
        for c in 0..d {
            scaled[[row, c]] /= rpn.for_channel(c);
        }
    }
    let mut rotated = apply_rope(&scaled, positions, cfg)?;
    for row in 0..rotated.nrows() {
        for (&c, &t) in &crs.t {
            rotated[[row, c]] /= t;
        }
    }
    Ok(rotated)
}

/// Compensate post-RoPE queries so the score matrix against smoothed keys
/// equals the unsmoothed score matrix: multiply channel `c` by the pair
/// scale and, for outlier channels, by the per-channel factor.
pub fn compensate_queries(
    q_post_rope: &Array2<f64>,
    rpn: &RpnScales,
    crs: &CrsScales,
) -> Result<Array2<f64>> {
    let (n, d) = q_post_rope.dim();
    if d != rpn.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "queries have {d} channels, pair scales cover {}",
            rpn.head_dim()
        )));
    }
    let mut out = q_post_rope.clone();
    for row in 0..n {
        for c in 0..d {
            out[[row, c]] *= rpn.for_channel(c) * crs.for_channel(c);
        }
    }
    Ok(out)
}

/// Fold the pair scales into a key projection: output channel `c` of
/// `w_k` (one row) is divided by its shared pair scale. The projection
/// then emits pre-scaled keys with no runtime work.
pub fn merge_rpn_into_key_projection(w_k: &Array2<f64>, rpn: &RpnScales) -> Result<Array2<f64>> {
    scale_projection_rows(w_k, rpn, |s| 1.0 / s)
}

/// Fold the inverse pair scales into a query projection: output channel
/// `c` of `w_q` is multiplied by its shared pair scale. Valid pre-RoPE
/// because pair-shared scaling commutes with the rotation.
pub fn merge_inverse_rpn_into_query_projection(
    w_q: &Array2<f64>,
    rpn: &RpnScales,
) -> Result<Array2<f64>> {
    scale_projection_rows(w_q, rpn, |s| s)
}

fn scale_projection_rows(
    w: &Array2<f64>,
    rpn: &RpnScales,
    factor: impl Fn(f64) -> f64,
) -> Result<Array2<f64>> {
    let (rows, _) = w.dim();
    if rows != rpn.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection has {rows} output channels, pair scales cover {}",
            rpn.head_dim()
        )));
    }
    let mut out = w.clone();
    for r in 0..rows {
        let f = factor(rpn.for_channel(r));
        for v in out.row_mut(r) {
            *v *= f;
        }
    }
    Ok(out)
}

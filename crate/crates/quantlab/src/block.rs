//! A single toy transformer block that wires the other modules together:
//! QKV projections, rotary embedding with key/value quantization, tiled
//! prefill attention, output projection, and a gated FFN, with every
//! calibration merge applied offline.
//!
//! Merge wiring is fixed by the block structure: the inverse channel
//! scales of the down projection fold into the up projection (the gating
//! product is elementwise), those of the output projection fold into the
//! value projection, pair scales fold out of the key projection and into
//! the query projection (pre-rotation, since pair-shared scaling
//! commutes), and per-channel outlier scales stay online post-rotation on
//! both the key and query paths. Projections whose producing layer sits
//! across a residual connection keep constant unit channel scales.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{reference_attention, tiled_attention_forward, PrecisionPolicy, TileSchedule};
use crate::error::{Error, Result};
use crate::gemm::{int4fp8_gemm, reference_gemm, Activation, EpilogueSpec, OutputFormat};
use crate::numerics::ScalarFormat;
use crate::quant::{
    dequantize_kv_row, fp8_quantize_activation_row, quantize_kv_row, quantize_weight,
    Fp8ActivationRow, QuantizedWeight, ScaleFormat,
};
use crate::rope::{
    apply_rope, compute_crs, compute_rpn, merge_inverse_rpn_into_query_projection,
    merge_rpn_into_key_projection, select_outlier_pairs, CrsScales, RopeConfig, RpnScales,
    DEFAULT_CRS_BETA, DEFAULT_OUTLIER_PAIRS, DEFAULT_RPN_ALPHA,
};
use crate::smoothing::{
    apply_cas, apply_pts, compute_cas, compute_pts_exponent, merge_inverse_cas, CasScales,
    CasTarget, PtsResult, SmoothingRecipe,
};

/// Block dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub model_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl BlockDims {
    pub fn kv_dim(&self) -> usize {
        self.head_dim * self.n_heads
    }
}

/// The seven linear layers of the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerId {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId::Q,
        LayerId::K,
        LayerId::V,
        LayerId::O,
        LayerId::Up,
        LayerId::Gate,
        LayerId::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Q => "q",
            LayerId::K => "k",
            LayerId::V => "v",
            LayerId::O => "o",
            LayerId::Up => "up",
            LayerId::Gate => "gate",
            LayerId::Down => "down",
        }
    }
}

/// Full-precision block weights. Each projection is `(out, in)` and is
/// applied as `Y = X W^T`. No biases or normalization layers are
/// modeled.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_gate: Array2<f64>,
    pub w_down: Array2<f64>,
    pub dims: BlockDims,
}

impl BlockWeights {
    pub fn layer(&self, id: LayerId) -> &Array2<f64> {
        match id {
            LayerId::Q => &self.w_q,
            LayerId::K => &self.w_k,
            LayerId::V => &self.w_v,
            LayerId::O => &self.w_o,
            LayerId::Up => &self.w_up,
            LayerId::Gate => &self.w_gate,
            LayerId::Down => &self.w_down,
        }
    }

    fn layer_mut(&mut self, id: LayerId) -> &mut Array2<f64> {
        match id {
            LayerId::Q => &mut self.w_q,
            LayerId::K => &mut self.w_k,
            LayerId::V => &mut self.w_v,
            LayerId::O => &mut self.w_o,
            LayerId::Up => &mut self.w_up,
            LayerId::Gate => &mut self.w_gate,
            LayerId::Down => &mut self.w_down,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.head_dim % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "head_dim {} must be even",
                d.head_dim
            )));
        }
        let kv = d.kv_dim();
        let checks = [
            ("q", self.w_q.dim(), (kv, d.model_dim)),
            ("k", self.w_k.dim(), (kv, d.model_dim)),
            ("v", self.w_v.dim(), (kv, d.model_dim)),
            ("o", self.w_o.dim(), (d.model_dim, kv)),
            ("up", self.w_up.dim(), (d.ffn_dim, d.model_dim)),
            ("gate", self.w_gate.dim(), (d.ffn_dim, d.model_dim)),
            ("down", self.w_down.dim(), (d.model_dim, d.ffn_dim)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "layer {name}: got {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Channel-scale mode for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CasMode {
    /// Unit scales (used where no neighbor can absorb the inverse).
    #[default]
    ConstantOne,
    /// Equalize channel absmeans toward their mean.
    Absmean,
}

/// Per-layer channel-scale modes. Only the down and output projections
/// have a neighbor that can absorb the inverse scales (up and value
/// respectively); the others sit across residual connections and default
/// to constant scales.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CasModes {
    pub q: CasMode,
    pub k: CasMode,
    pub v: CasMode,
    pub o: CasMode,
    pub up: CasMode,
    pub gate: CasMode,
    pub down: CasMode,
}

impl Default for CasModes {
    fn default() -> Self {
        Self {
            q: CasMode::ConstantOne,
            k: CasMode::ConstantOne,
            v: CasMode::ConstantOne,
            o: CasMode::Absmean,
            up: CasMode::ConstantOne,
            gate: CasMode::ConstantOne,
            down: CasMode::Absmean,
        }
    }
}

impl CasModes {
    fn get(&self, id: LayerId) -> CasMode {
        match id {
            LayerId::Q => self.q,
            LayerId::K => self.k,
            LayerId::V => self.v,
            LayerId::O => self.o,
            LayerId::Up => self.up,
            LayerId::Gate => self.gate,
            LayerId::Down => self.down,
        }
    }
}

/// Calibration knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub group_size: usize,
    pub scale_format: ScaleFormat,
    pub alpha: f64,
    pub beta: f64,
    pub outlier_pairs: usize,
    pub rope_base: f64,
    pub enable_cas: bool,
    pub enable_pts: bool,
    pub enable_rpn: bool,
    pub enable_crs: bool,
    pub cas_modes: CasModes,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            group_size: crate::quant::DEFAULT_GROUP_SIZE,
            scale_format: ScaleFormat::Fp8,
            alpha: DEFAULT_RPN_ALPHA,
            beta: DEFAULT_CRS_BETA,
            outlier_pairs: DEFAULT_OUTLIER_PAIRS,
            rope_base: crate::rope::DEFAULT_ROPE_BASE,
            enable_cas: true,
            enable_pts: true,
            enable_rpn: true,
            enable_crs: true,
            cas_modes: CasModes::default(),
        }
    }
}

/// The per-layer smoothing recipes plus the shared rotary config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockRecipes {
    pub q: SmoothingRecipe,
    pub k: SmoothingRecipe,
    pub v: SmoothingRecipe,
    pub o: SmoothingRecipe,
    pub up: SmoothingRecipe,
    pub gate: SmoothingRecipe,
    pub down: SmoothingRecipe,
    pub rope: RopeConfig,
}

impl BlockRecipes {
    pub fn layer(&self, id: LayerId) -> &SmoothingRecipe {
        match id {
            LayerId::Q => &self.q,
            LayerId::K => &self.k,
            LayerId::V => &self.v,
            LayerId::O => &self.o,
            LayerId::Up => &self.up,
            LayerId::Gate => &self.gate,
            LayerId::Down => &self.down,
        }
    }

    fn layer_mut(&mut self, id: LayerId) -> &mut SmoothingRecipe {
        match id {
            LayerId::Q => &mut self.q,
            LayerId::K => &mut self.k,
            LayerId::V => &mut self.v,
            LayerId::O => &mut self.o,
            LayerId::Up => &mut self.up,
            LayerId::Gate => &mut self.gate,
            LayerId::Down => &mut self.down,
        }
    }

    /// Per-head key-path pair scales (unit scales when disabled).
    pub fn key_rpn(&self) -> Option<&Vec<RpnScales>> {
        self.k.rpn.as_ref()
    }

    /// Per-head outlier-channel scales (empty when disabled).
    pub fn key_crs(&self) -> Option<&Vec<CrsScales>> {
        self.k.crs.as_ref()
    }
}

/// The quantized block: one quantized weight per layer plus the recipes
/// needed at run time (outlier-channel scales, rotary config).
#[derive(Clone, Debug)]
pub struct QuantizedBlock {
    pub dims: BlockDims,
    pub group_size: usize,
    pub scale_format: ScaleFormat,
    pub q: QuantizedWeight,
    pub k: QuantizedWeight,
    pub v: QuantizedWeight,
    pub o: QuantizedWeight,
    pub up: QuantizedWeight,
    pub gate: QuantizedWeight,
    pub down: QuantizedWeight,
    pub recipes: BlockRecipes,
}

impl QuantizedBlock {
    pub fn layer(&self, id: LayerId) -> &QuantizedWeight {
        match id {
            LayerId::Q => &self.q,
            LayerId::K => &self.k,
            LayerId::V => &self.v,
            LayerId::O => &self.o,
            LayerId::Up => &self.up,
            LayerId::Gate => &self.gate,
            LayerId::Down => &self.down,
        }
    }
}

fn silu_f64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Compute every recipe from the weights and a calibration activation
/// matrix (tokens x model dim): channel scales per layer, pair and
/// outlier-channel scales from the calibration keys, and the
/// power-of-two exponent of each merged tensor.
pub fn compute_block_recipes(
    weights: &BlockWeights,
    calib: &Array2<f64>,
    cfg: &CalibrationConfig,
) -> Result<BlockRecipes> {
    weights.validate()?;
    let dims = weights.dims;
    if calib.ncols() != dims.model_dim {
        return Err(Error::DimensionMismatch(format!(
            "calibration activations have {} columns, model dim is {}",
            calib.ncols(),
            dims.model_dim
        )));
    }
    if calib.nrows() == 0 {
        return Err(Error::DimensionMismatch(
            "calibration activations are empty".into(),
        ));
    }
    let rope = RopeConfig::with_base(dims.head_dim, cfg.rope_base)?;
    let pos = positions(calib.nrows());

    // Key statistics come from one full-precision projection pass.
    let k_pre = reference_gemm(calib, &weights.w_k)?;
    let mut rpn_heads = Vec::with_capacity(dims.n_heads);
    let mut crs_heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let cols = h * dims.head_dim..(h + 1) * dims.head_dim;
        let k_head = k_pre.slice(s![.., cols]).to_owned();
        let rpn = if cfg.enable_rpn {
            compute_rpn(&k_head, cfg.alpha)?
        } else {
            RpnScales::identity(dims.head_dim)
        };
        let crs = if cfg.enable_crs {
            // Outliers are ranked on the raw rotated keys (pair-scale
            // normalization would equalize them away), while the factors
            // are computed on the pair-scaled rotated keys: those are the
            // values the division sees at run time.
            let k_rot_raw = apply_rope(&k_head, &pos, &rope)?;
            let pairs =
                select_outlier_pairs(&k_rot_raw, cfg.outlier_pairs.min(dims.head_dim / 2))?;
            let mut k_scaled = k_head.clone();
            for row in 0..k_scaled.nrows() {
                for c in 0..dims.head_dim {
                    k_scaled[[row, c]] /= rpn.for_channel(c);
                }
            }
            let k_rot = apply_rope(&k_scaled, &pos, &rope)?;
            compute_crs(&k_rot, &pairs, cfg.beta)?
        } else {
            CrsScales::identity()
        };
        rpn_heads.push(rpn);
        crs_heads.push(crs);
    }

    let mut recipes = BlockRecipes {
        q: SmoothingRecipe::neutral(dims.model_dim, "q"),
        k: SmoothingRecipe::neutral(dims.model_dim, "k"),
        v: SmoothingRecipe::neutral(dims.model_dim, "v"),
        o: SmoothingRecipe::neutral(dims.kv_dim(), "o"),
        up: SmoothingRecipe::neutral(dims.model_dim, "up"),
        gate: SmoothingRecipe::neutral(dims.model_dim, "gate"),
        down: SmoothingRecipe::neutral(dims.ffn_dim, "down"),
        rope: rope.clone(),
    };
    recipes.k.rpn = Some(rpn_heads.clone());
    recipes.k.crs = Some(crs_heads.clone());
    recipes.k.rope = Some(rope.clone());
    recipes.q.rpn = Some(rpn_heads);
    recipes.q.crs = Some(crs_heads);
    recipes.q.rope = Some(rope);

    // Channel scales per layer, computed on the raw tensors.
    for id in LayerId::ALL {
        let mode = if cfg.enable_cas {
            cfg.cas_modes.get(id)
        } else {
            CasMode::ConstantOne
        };
        match (mode, id) {
            (CasMode::ConstantOne, _) => {}
            (CasMode::Absmean, LayerId::O | LayerId::Down) => {
                recipes.layer_mut(id).cas =
                    compute_cas(weights.layer(id), CasTarget::MeanOfAbsmeans);
            }
            (CasMode::Absmean, other) => {
                return Err(Error::InvalidConfig(format!(
                    "layer {} has no neighbor to absorb inverse channel scales; \
                     only the down and output projections support absmean mode",
                    other.name()
                )));
            }
        }
    }

    // Power-of-two exponents come from the merged tensors.
    if cfg.enable_pts {
        let merged = apply_block_recipes(weights, &recipes, false)?;
        for id in LayerId::ALL {
            recipes.layer_mut(id).pts = compute_pts_exponent(merged.layer(id))?;
        }
    }
    Ok(recipes)
}

/// Apply the offline merges a recipe set prescribes. With `with_pts` the
/// power-of-two pre-scale is applied as well, yielding exactly the
/// tensors that get quantized.
pub fn apply_block_recipes(
    weights: &BlockWeights,
    recipes: &BlockRecipes,
    with_pts: bool,
) -> Result<BlockWeights> {
    weights.validate()?;
    let dims = weights.dims;
    let mut merged = weights.clone();

    // Pair scales: out of the key projection, into the query projection.
    if let Some(rpn_heads) = recipes.key_rpn() {
        if rpn_heads.len() != dims.n_heads {
            return Err(Error::DimensionMismatch(format!(
                "{} pair-scale sets for {} heads",
                rpn_heads.len(),
                dims.n_heads
            )));
        }
        for (h, rpn) in rpn_heads.iter().enumerate() {
            let rows = h * dims.head_dim..(h + 1) * dims.head_dim;
            let k_head = merged.w_k.slice(s![rows.clone(), ..]).to_owned();
            let q_head = merged.w_q.slice(s![rows.clone(), ..]).to_owned();
            merged
                .w_k
                .slice_mut(s![rows.clone(), ..])
                .assign(&merge_rpn_into_key_projection(&k_head, rpn)?);
            merged
                .w_q
                .slice_mut(s![rows, ..])
                .assign(&merge_inverse_rpn_into_query_projection(&q_head, rpn)?);
        }
    }

    // Channel scales: into the layer itself, inverse into its producer.
    if !recipes.o.cas.is_identity() {
        merged.w_o = apply_cas(&merged.w_o, &recipes.o.cas)?;
        merged.w_v = merge_inverse_cas(&merged.w_v, &recipes.o.cas)?;
    }
    if !recipes.down.cas.is_identity() {
        merged.w_down = apply_cas(&merged.w_down, &recipes.down.cas)?;
        merged.w_up = merge_inverse_cas(&merged.w_up, &recipes.down.cas)?;
    }

    if with_pts {
        for id in LayerId::ALL {
            let n = recipes.layer(id).pts.exponent;
            if n > 0 {
                let scaled = apply_pts(weights_ref(&merged, id), n);
                *merged.layer_mut(id) = scaled;
            }
        }
    }
    Ok(merged)
}

fn weights_ref(w: &BlockWeights, id: LayerId) -> &Array2<f64> {
    w.layer(id)
}

/// Calibrate and quantize in one step.
pub fn calibrate_block(
    weights: &BlockWeights,
    calib: &Array2<f64>,
    cfg: &CalibrationConfig,
) -> Result<QuantizedBlock> {
    let recipes = compute_block_recipes(weights, calib, cfg)?;
    quantize_block(weights, &recipes, cfg)
}

/// Quantize prepared weights under an existing recipe set.
pub fn quantize_block(
    weights: &BlockWeights,
    recipes: &BlockRecipes,
    cfg: &CalibrationConfig,
) -> Result<QuantizedBlock> {
    let merged = apply_block_recipes(weights, recipes, true)?;
    let quantize = |id: LayerId| -> Result<QuantizedWeight> {
        quantize_weight(
            merged.layer(id),
            cfg.group_size,
            recipes.layer(id),
            cfg.scale_format,
        )
    };
    Ok(QuantizedBlock {
        dims: weights.dims,
        group_size: cfg.group_size,
        scale_format: cfg.scale_format,
        q: quantize(LayerId::Q)?,
        k: quantize(LayerId::K)?,
        v: quantize(LayerId::V)?,
        o: quantize(LayerId::O)?,
        up: quantize(LayerId::Up)?,
        gate: quantize(LayerId::Gate)?,
        down: quantize(LayerId::Down)?,
        recipes: recipes.clone(),
    })
}

/// Full-precision reference forward pass: residual attention block then
/// residual gated FFN, all in f64 with fixed reduction orders.
pub fn forward_fp32(weights: &BlockWeights, x: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, out) = forward_fp32_stages(weights, x)?;
    let _ = h;
    Ok(out)
}

/// Reference forward returning the post-attention residual state as well.
pub fn forward_fp32_stages(
    weights: &BlockWeights,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    weights.validate()?;
    let dims = weights.dims;
    if x.ncols() != dims.model_dim {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, model dim is {}",
            x.ncols(),
            dims.model_dim
        )));
    }
    let n = x.nrows();
    let pos = positions(n);
    let rope = RopeConfig::new(dims.head_dim)?;

    let q = reference_gemm(x, &weights.w_q)?;
    let k = reference_gemm(x, &weights.w_k)?;
    let v = reference_gemm(x, &weights.w_v)?;

    let mut ctx = Array2::zeros((n, dims.kv_dim()));
    for hd in 0..dims.n_heads {
        let cols = hd * dims.head_dim..(hd + 1) * dims.head_dim;
        let q_h = apply_rope(&q.slice(s![.., cols.clone()]).to_owned(), &pos, &rope)?;
        let k_h = apply_rope(&k.slice(s![.., cols.clone()]).to_owned(), &pos, &rope)?;
        let v_h = v.slice(s![.., cols.clone()]).to_owned();
        let attn = reference_attention(&q_h, &k_h, &v_h, true, None)?;
        ctx.slice_mut(s![.., cols]).assign(&attn);
    }
    let attn_out = reference_gemm(&ctx, &weights.w_o)?;
    let h = x + &attn_out;

    let up = reference_gemm(&h, &weights.w_up)?;
    let gate = reference_gemm(&h, &weights.w_gate)?;
    let act = Array2::from_shape_fn(up.dim(), |(r, c)| silu_f64(gate[[r, c]]) * up[[r, c]]);
    let ffn = reference_gemm(&act, &weights.w_down)?;
    let out = &h + &ffn;
    Ok((h, out))
}

/// Exact-arithmetic forward over merged weights with the runtime
/// compensations (power-of-two folds, online outlier-channel scales) but
/// no quantization anywhere. In exact arithmetic this reproduces the
/// unsmoothed reference forward, which is the merge-neutrality check and
/// the degenerate "passthrough" run mode.
pub fn forward_merged_exact(
    weights: &BlockWeights,
    recipes: &BlockRecipes,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    let merged = apply_block_recipes(weights, recipes, true)?;
    let dims = weights.dims;
    let n = x.nrows();
    let pos = positions(n);
    let rope = &recipes.rope;

    let fold = |y: Array2<f64>, id: LayerId| -> Array2<f64> {
        let e = recipes.layer(id).pts.exponent;
        if e > 0 {
            crate::smoothing::fold_inverse_pts(&y, e)
        } else {
            y
        }
    };

    let q = fold(reference_gemm(x, &merged.w_q)?, LayerId::Q);
    let k = fold(reference_gemm(x, &merged.w_k)?, LayerId::K);
    let v = fold(reference_gemm(x, &merged.w_v)?, LayerId::V);

    let identity_crs = vec![CrsScales::identity(); dims.n_heads];
    let crs_heads = recipes.key_crs().unwrap_or(&identity_crs);

    let mut ctx = Array2::zeros((n, dims.kv_dim()));
    for hd in 0..dims.n_heads {
        let cols = hd * dims.head_dim..(hd + 1) * dims.head_dim;
        let crs = &crs_heads[hd];
        let mut q_h = apply_rope(&q.slice(s![.., cols.clone()]).to_owned(), &pos, rope)?;
        let mut k_h = apply_rope(&k.slice(s![.., cols.clone()]).to_owned(), &pos, rope)?;
        for row in 0..n {
            for (&c, &t) in &crs.t {
                q_h[[row, c]] *= t;
                k_h[[row, c]] /= t;
            }
        }
        let v_h = v.slice(s![.., cols.clone()]).to_owned();
        let attn = reference_attention(&q_h, &k_h, &v_h, true, None)?;
        ctx.slice_mut(s![.., cols]).assign(&attn);
    }
    let attn_out = fold(reference_gemm(&ctx, &merged.w_o)?, LayerId::O);
    let h = x + &attn_out;

    let up = fold(reference_gemm(&h, &merged.w_up)?, LayerId::Up);
    let gate = fold(reference_gemm(&h, &merged.w_gate)?, LayerId::Gate);
    let act = Array2::from_shape_fn(up.dim(), |(r, c)| silu_f64(gate[[r, c]]) * up[[r, c]]);
    let ffn = fold(reference_gemm(&act, &merged.w_down)?, LayerId::Down);
    Ok(&h + &ffn)
}

/// Runtime options for the quantized forward.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub policy: PrecisionPolicy,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            policy: PrecisionPolicy::mixed(),
            block_rows: 64,
            block_cols: 64,
        }
    }
}

/// Error metrics of a quantized forward against the full-precision
/// reference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub output_rel_frobenius: f64,
    pub output_max_abs: f64,
    pub attention_rel_frobenius: f64,
}

pub fn rel_frobenius(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let num: f64 = got
        .iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = want.iter().map(|b| b.powi(2)).sum();
    (num / den).sqrt()
}

fn quantize_rows(x: &Array2<f64>) -> Vec<Fp8ActivationRow> {
    (0..x.nrows())
        .map(|r| fp8_quantize_activation_row(&x.row(r).to_vec()))
        .collect()
}

fn output_format_for(policy: &PrecisionPolicy) -> OutputFormat {
    match policy.output_format {
        ScalarFormat::Fp32 => OutputFormat::Fp32,
        _ => OutputFormat::Bf16,
    }
}

/// Quantized forward pass: activations FP8-quantized per row before each
/// linear layer, keys and values per-token INT4 with table
/// dequantization, queries FP8 with online outlier-channel compensation,
/// attention under the precision policy.
pub fn forward_quantized(
    qblock: &QuantizedBlock,
    x: &Array2<f64>,
    opts: &ForwardOptions,
) -> Result<Array2<f64>> {
    Ok(forward_quantized_stages(qblock, x, opts)?.1)
}

fn forward_quantized_stages(
    qblock: &QuantizedBlock,
    x: &Array2<f64>,
    opts: &ForwardOptions,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let dims = qblock.dims;
    if x.ncols() != dims.model_dim {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, model dim is {}",
            x.ncols(),
            dims.model_dim
        )));
    }
    let n = x.nrows();
    let pos = positions(n);
    let rope = &qblock.recipes.rope;
    let out_fmt = output_format_for(&opts.policy);
    let epilogue = |spec: EpilogueSpec| EpilogueSpec {
        output_format: out_fmt,
        ..spec
    };

    let x_rows = quantize_rows(x);
    let (q, _) = int4fp8_gemm(&x_rows, &qblock.q, &epilogue(EpilogueSpec::none()))?;
    let (k, _) = int4fp8_gemm(&x_rows, &qblock.k, &epilogue(EpilogueSpec::none()))?;
    let (v, _) = int4fp8_gemm(&x_rows, &qblock.v, &epilogue(EpilogueSpec::none()))?;

    let identity_crs = vec![CrsScales::identity(); dims.n_heads];
    let crs_heads = qblock.recipes.key_crs().unwrap_or(&identity_crs);
    let schedule = TileSchedule::new(opts.block_rows, opts.block_cols, true);

    let mut ctx = Array2::zeros((n, dims.kv_dim()));
    for hd in 0..dims.n_heads {
        let cols = hd * dims.head_dim..(hd + 1) * dims.head_dim;
        let crs = &crs_heads[hd];

        // Queries: rotate, compensate outlier channels, quantize to FP8.
        let mut q_h = apply_rope(&q.slice(s![.., cols.clone()]).to_owned(), &pos, rope)?;
        for row in 0..n {
            for (&c, &t) in &crs.t {
                q_h[[row, c]] *= t;
            }
        }
        let q_deq = {
            let mut m = Array2::zeros((n, dims.head_dim));
            for row in 0..n {
                let qrow = fp8_quantize_activation_row(&q_h.row(row).to_vec());
                for (c, val) in qrow.dequantize().into_iter().enumerate() {
                    m[[row, c]] = val;
                }
            }
            m
        };

        // Keys: rotate, smooth outlier channels, per-token INT4, then
        // dequantize through the table into FP8 values.
        let mut k_h = apply_rope(&k.slice(s![.., cols.clone()]).to_owned(), &pos, rope)?;
        for row in 0..n {
            for (&c, &t) in &crs.t {
                k_h[[row, c]] /= t;
            }
        }
        let k_deq = {
            let mut m = Array2::zeros((n, dims.head_dim));
            for row in 0..n {
                let kv = quantize_kv_row(&k_h.row(row).to_vec())?;
                for (c, val) in dequantize_kv_row(&kv).into_iter().enumerate() {
                    m[[row, c]] = val * kv.scale.to_f64();
                }
            }
            m
        };

        // Values: per-token INT4, table-dequantized.
        let v_deq = {
            let v_h = v.slice(s![.., cols.clone()]).to_owned();
            let mut m = Array2::zeros((n, dims.head_dim));
            for row in 0..n {
                let kv = quantize_kv_row(&v_h.row(row).to_vec())?;
                for (c, val) in dequantize_kv_row(&kv).into_iter().enumerate() {
                    m[[row, c]] = val * kv.scale.to_f64();
                }
            }
            m
        };

        let attn = tiled_attention_forward(&q_deq, &k_deq, &v_deq, &schedule, &opts.policy)?;
        ctx.slice_mut(s![.., cols]).assign(&attn);
    }

    let ctx_rows = quantize_rows(&ctx);
    let (h, _) = int4fp8_gemm(
        &ctx_rows,
        &qblock.o,
        &epilogue(EpilogueSpec {
            residual: Some(x.clone()),
            ..EpilogueSpec::none()
        }),
    )?;

    let h_rows = quantize_rows(&h);
    let (up, _) = int4fp8_gemm(&h_rows, &qblock.up, &epilogue(EpilogueSpec::none()))?;
    let (gated, _) = int4fp8_gemm(
        &h_rows,
        &qblock.gate,
        &epilogue(EpilogueSpec {
            activation: Activation::Silu,
            elementwise_multiplier: Some(up),
            ..EpilogueSpec::none()
        }),
    )?;
    let gated_rows = quantize_rows(&gated);
    let (out, _) = int4fp8_gemm(
        &gated_rows,
        &qblock.down,
        &epilogue(EpilogueSpec {
            residual: Some(h.clone()),
            ..EpilogueSpec::none()
        }),
    )?;
    Ok((h, out))
}

/// Quantized forward plus error metrics against the full-precision
/// reference forward of the original (unmerged) weights.
pub fn forward_quantized_with_report(
    qblock: &QuantizedBlock,
    weights: &BlockWeights,
    x: &Array2<f64>,
    opts: &ForwardOptions,
) -> Result<(Array2<f64>, ErrorReport)> {
    let (h_ref, out_ref) = forward_fp32_stages(weights, x)?;
    let (h_q, out_q) = forward_quantized_stages(qblock, x, opts)?;
    let report = ErrorReport {
        output_rel_frobenius: rel_frobenius(&out_q, &out_ref),
        output_max_abs: out_q
            .iter()
            .zip(out_ref.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        attention_rel_frobenius: rel_frobenius(&h_q, &h_ref),
    };
    Ok((out_q, report))
}

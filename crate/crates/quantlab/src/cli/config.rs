//! Run configuration: one JSON document covering generation, calibration,
//! quantization, and execution. Command-line flags override individual
//! fields of a loaded (or default) config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::PrecisionPolicy;
use crate::block::{BlockDims, CalibrationConfig, CasModes};
use crate::error::{Error, Result};
use crate::quant::ScaleFormat;
use crate::synth::OutlierSpec;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DimsConfig {
    pub model: usize,
    pub head: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seq: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self {
            model: 256,
            head: 64,
            heads: 4,
            ffn: 512,
            seq: 128,
        }
    }
}

impl DimsConfig {
    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.model,
            head_dim: self.head,
            n_heads: self.heads,
            ffn_dim: self.ffn,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TileConfig {
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            block_rows: 64,
            block_cols: 64,
        }
    }
}

/// The complete run configuration. Defaults follow the calibrated
/// operating point: 128-wide groups, alpha = beta = 8, eight outlier
/// channel pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: DimsConfig,
    pub group_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub outlier_pairs: usize,
    pub scale_format: ScaleFormat,
    pub rope_base: f64,
    pub enable_cas: bool,
    pub enable_pts: bool,
    pub enable_rpn: bool,
    pub enable_crs: bool,
    pub cas_modes: CasModes,
    pub policy: PrecisionPolicy,
    pub tile: TileConfig,
    pub calib_tokens: usize,
    pub weight_scale: f64,
    pub inject: OutlierSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: DimsConfig::default(),
            group_size: 128,
            alpha: 8.0,
            beta: 8.0,
            outlier_pairs: 8,
            scale_format: ScaleFormat::Fp8,
            rope_base: 10_000.0,
            enable_cas: true,
            enable_pts: true,
            enable_rpn: true,
            enable_crs: true,
            cas_modes: CasModes::default(),
            policy: PrecisionPolicy::mixed(),
            tile: TileConfig::default(),
            calib_tokens: 64,
            weight_scale: 0.05,
            inject: OutlierSpec::none(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            group_size: self.group_size,
            scale_format: self.scale_format,
            alpha: self.alpha,
            beta: self.beta,
            outlier_pairs: self.outlier_pairs,
            rope_base: self.rope_base,
            enable_cas: self.enable_cas,
            enable_pts: self.enable_pts,
            enable_rpn: self.enable_rpn,
            enable_crs: self.enable_crs,
            cas_modes: self.cas_modes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.head % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head dim {} must be even",
                d.head
            )));
        }
        for (name, dim) in [
            ("model", d.model),
            ("kv", d.head * d.heads),
            ("ffn", d.ffn),
        ] {
            if dim % self.group_size != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} dim {dim} is not divisible by group size {}",
                    self.group_size
                )));
            }
        }
        if self.outlier_pairs > d.head / 2 {
            return Err(Error::InvalidConfig(format!(
                "{} outlier pairs exceed {} available pairs",
                self.outlier_pairs,
                d.head / 2
            )));
        }
        Ok(())
    }
}

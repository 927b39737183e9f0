//! Bridging between in-memory block structures and the package container:
//! weight packages (fp32 tensors plus the generating config), recipe
//! packages (calibration document only), and quantized packages (packed
//! codes and group scales per layer plus the calibration document).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::block::{BlockDims, BlockRecipes, BlockWeights, CalibrationConfig, LayerId, QuantizedBlock};
use crate::error::{Error, Result};
use crate::numerics::{Bf16, Fp8E4M3};
use crate::quant::{GroupScale, QuantGroup, QuantizedWeight, ScaleFormat};
use crate::tensorio::{Package, Tensor, TensorData};

use super::config::RunConfig;

pub const RECIPE_VERSION: u32 = 1;
pub const GEN_CONFIG_KEY: &str = "gen_config";
pub const CALIBRATION_KEY: &str = "calibration";

/// The versioned calibration document embedded in recipe and quantized
/// packages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecipeDoc {
    pub version: u32,
    pub dims: BlockDims,
    pub config: CalibrationConfig,
    pub recipes: BlockRecipes,
}

impl RecipeDoc {
    pub fn check_version(&self) -> Result<()> {
        if self.version != RECIPE_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: RECIPE_VERSION,
            });
        }
        Ok(())
    }
}

fn weight_tensor_name(id: LayerId) -> String {
    format!("w_{}", id.name())
}

/// Weights + calibration + input tensors, plus the generating config.
pub fn weights_to_package(
    weights: &BlockWeights,
    calib: &Array2<f64>,
    input: &Array2<f64>,
    cfg: &RunConfig,
) -> Result<Package> {
    let mut tensors = Vec::new();
    for id in LayerId::ALL {
        tensors.push(Tensor::from_f64_matrix(
            weight_tensor_name(id),
            weights.layer(id),
        ));
    }
    tensors.push(Tensor::from_f64_matrix("calib", calib));
    tensors.push(Tensor::from_f64_matrix("input", input));
    let mut recipes = std::collections::BTreeMap::new();
    recipes.insert(
        GEN_CONFIG_KEY.to_string(),
        serde_json::to_value(cfg).map_err(|e| Error::MalformedHeader(e.to_string()))?,
    );
    Ok(Package { tensors, recipes })
}

/// Reconstruct block weights (and the stored config) from a weights
/// package.
pub fn package_to_weights(pkg: &Package) -> Result<(BlockWeights, RunConfig)> {
    let cfg: RunConfig = serde_json::from_value(pkg.recipe(GEN_CONFIG_KEY)?.clone())
        .map_err(|e| Error::MalformedHeader(format!("gen_config: {e}")))?;
    let dims = cfg.dims.block_dims();
    let get = |id: LayerId| -> Result<Array2<f64>> {
        pkg.tensor(&weight_tensor_name(id))?.to_f64_matrix()
    };
    let weights = BlockWeights {
        w_q: get(LayerId::Q)?,
        w_k: get(LayerId::K)?,
        w_v: get(LayerId::V)?,
        w_o: get(LayerId::O)?,
        w_up: get(LayerId::Up)?,
        w_gate: get(LayerId::Gate)?,
        w_down: get(LayerId::Down)?,
        dims,
    };
    weights.validate()?;
    Ok((weights, cfg))
}

/// A recipe-only package.
pub fn recipes_to_package(doc: &RecipeDoc) -> Result<Package> {
    let mut recipes = std::collections::BTreeMap::new();
    recipes.insert(
        CALIBRATION_KEY.to_string(),
        serde_json::to_value(doc).map_err(|e| Error::MalformedHeader(e.to_string()))?,
    );
    Ok(Package {
        tensors: Vec::new(),
        recipes,
    })
}

pub fn package_to_recipes(pkg: &Package) -> Result<RecipeDoc> {
    let doc: RecipeDoc = serde_json::from_value(pkg.recipe(CALIBRATION_KEY)?.clone())
        .map_err(|e| Error::MalformedHeader(format!("calibration: {e}")))?;
    doc.check_version()?;
    Ok(doc)
}

/// Quantized package: per layer, packed INT4 codes `(n_out, n_in)` and
/// group scales `(n_out, n_in/group_size)`, plus the calibration
/// document.
pub fn qblock_to_package(qblock: &QuantizedBlock, config: &CalibrationConfig) -> Result<Package> {
    let doc = RecipeDoc {
        version: RECIPE_VERSION,
        dims: qblock.dims,
        config: config.clone(),
        recipes: qblock.recipes.clone(),
    };
    let mut tensors = Vec::new();
    for id in LayerId::ALL {
        let qw = qblock.layer(id);
        let (n_out, n_in) = qw.shape;
        let mut codes = Vec::with_capacity(n_out * n_in);
        for g in &qw.groups {
            codes.extend_from_slice(&g.codes);
        }
        tensors.push(Tensor::new(
            format!("{}.codes", id.name()),
            vec![n_out, n_in],
            TensorData::Int4(codes),
        )?);
        let scales = match qblock.scale_format {
            ScaleFormat::Fp8 => TensorData::Fp8(
                qw.groups
                    .iter()
                    .map(|g| match g.scale {
                        GroupScale::Fp8(s) => s,
                        GroupScale::Bf16(_) => Fp8E4M3::ZERO,
                    })
                    .collect(),
            ),
            ScaleFormat::Bf16 => TensorData::Bf16(
                qw.groups
                    .iter()
                    .map(|g| match g.scale {
                        GroupScale::Bf16(s) => s,
                        GroupScale::Fp8(_) => Bf16::ZERO,
                    })
                    .collect(),
            ),
        };
        tensors.push(Tensor::new(
            format!("{}.scales", id.name()),
            vec![n_out, n_in / qw.group_size],
            scales,
        )?);
    }
    let mut recipes = std::collections::BTreeMap::new();
    recipes.insert(
        CALIBRATION_KEY.to_string(),
        serde_json::to_value(&doc).map_err(|e| Error::MalformedHeader(e.to_string()))?,
    );
    Ok(Package { tensors, recipes })
}

pub fn package_to_qblock(pkg: &Package) -> Result<QuantizedBlock> {
    let doc = package_to_recipes(pkg)?;
    let group_size = doc.config.group_size;
    let scale_format = doc.config.scale_format;
    let load = |id: LayerId| -> Result<QuantizedWeight> {
        let codes_t = pkg.tensor(&format!("{}.codes", id.name()))?;
        let scales_t = pkg.tensor(&format!("{}.scales", id.name()))?;
        let (n_out, n_in) = (codes_t.shape[0], codes_t.shape[1]);
        if n_in % group_size != 0 {
            return Err(Error::NotDivisible {
                what: "input channels",
                len: n_in,
                group_size,
            });
        }
        let codes = match &codes_t.data {
            TensorData::Int4(c) => c,
            _ => {
                return Err(Error::MalformedHeader(format!(
                    "{}.codes must be int4packed",
                    id.name()
                )))
            }
        };
        let groups_per_row = n_in / group_size;
        let expected_groups = n_out * groups_per_row;
        let mut groups = Vec::with_capacity(expected_groups);
        for gi in 0..expected_groups {
            let scale = match (&scales_t.data, scale_format) {
                (TensorData::Fp8(s), ScaleFormat::Fp8) => GroupScale::Fp8(s[gi]),
                (TensorData::Bf16(s), ScaleFormat::Bf16) => GroupScale::Bf16(s[gi]),
                _ => {
                    return Err(Error::MalformedHeader(format!(
                        "{}.scales dtype does not match the declared scale format",
                        id.name()
                    )))
                }
            };
            groups.push(QuantGroup {
                scale,
                codes: codes[gi * group_size..(gi + 1) * group_size].to_vec(),
            });
        }
        Ok(QuantizedWeight {
            shape: (n_out, n_in),
            group_size,
            groups,
            pts_exponent: doc.recipes.layer(id).pts.exponent,
            smoothing: doc.recipes.layer(id).clone(),
        })
    };
    Ok(QuantizedBlock {
        dims: doc.dims,
        group_size,
        scale_format,
        q: load(LayerId::Q)?,
        k: load(LayerId::K)?,
        v: load(LayerId::V)?,
        o: load(LayerId::O)?,
        up: load(LayerId::Up)?,
        gate: load(LayerId::Gate)?,
        down: load(LayerId::Down)?,
        recipes: doc.recipes,
    })
}

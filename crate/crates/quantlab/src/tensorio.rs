//! Bit-exact single-file container for tensors and calibration recipes.
//!
//! Layout: a fixed 16-byte preamble (magic, format version, header
//! length), a JSON header describing the tensors (name, dtype, shape,
//! byte offset, byte length) and holding the recipe documents, then a
//! raw little-endian payload in which every tensor starts on a 64-byte
//! boundary. Offsets are relative to the payload start. Reading a
//! written package reproduces every payload byte exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pack_int4, unpack_int4, Bf16, Fp16, Fp8E4M3};

const MAGIC: &[u8; 4] = b"QLPK";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp32,
    Bf16,
    Fp16,
    Fp8E4M3,
    Int4Packed,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Fp32 => "fp32",
            DType::Bf16 => "bf16",
            DType::Fp16 => "fp16",
            DType::Fp8E4M3 => "fp8e4m3",
            DType::Int4Packed => "int4packed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(DType::Fp32),
            "bf16" => Ok(DType::Bf16),
            "fp16" => Ok(DType::Fp16),
            "fp8e4m3" => Ok(DType::Fp8E4M3),
            "int4packed" => Ok(DType::Int4Packed),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    /// Payload bytes for `numel` elements.
    pub fn byte_len(self, numel: usize) -> usize {
        match self {
            DType::Fp32 => numel * 4,
            DType::Bf16 | DType::Fp16 => numel * 2,
            DType::Fp8E4M3 => numel,
            DType::Int4Packed => numel.div_ceil(2),
        }
    }
}

/// Tensor storage, kept in the exact code domain of its dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Fp32(Vec<f32>),
    Bf16(Vec<Bf16>),
    Fp16(Vec<Fp16>),
    Fp8(Vec<Fp8E4M3>),
    /// Unpacked signed codes in `[-8, 7]`; packed two per byte on disk.
    Int4(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Fp32(_) => DType::Fp32,
            TensorData::Bf16(_) => DType::Bf16,
            TensorData::Fp16(_) => DType::Fp16,
            TensorData::Fp8(_) => DType::Fp8E4M3,
            TensorData::Int4(_) => DType::Int4Packed,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::Fp32(v) => v.len(),
            TensorData::Bf16(v) => v.len(),
            TensorData::Fp16(v) => v.len(),
            TensorData::Fp8(v) => v.len(),
            TensorData::Int4(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::Fp32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Bf16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            TensorData::Fp16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            TensorData::Fp8(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::Int4(v) => pack_int4(v),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8], numel: usize) -> Self {
        match dtype {
            DType::Fp32 => TensorData::Fp32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            DType::Bf16 => TensorData::Bf16(
                bytes
                    .chunks_exact(2)
                    .map(|b| Bf16::from_bits(u16::from_le_bytes([b[0], b[1]])))
                    .collect(),
            ),
            DType::Fp16 => TensorData::Fp16(
                bytes
                    .chunks_exact(2)
                    .map(|b| Fp16::from_bits(u16::from_le_bytes([b[0], b[1]])))
                    .collect(),
            ),
            DType::Fp8E4M3 => {
                TensorData::Fp8(bytes.iter().map(|&b| Fp8E4M3::from_bits(b)).collect())
            }
            DType::Int4Packed => TensorData::Int4(unpack_int4(bytes, numel)),
        }
    }
}

/// A named, shaped tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} has {numel} elements, data holds {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Store an f64 matrix as fp32.
    pub fn from_f64_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        let (r, c) = m.dim();
        Tensor {
            name: name.into(),
            shape: vec![r, c],
            data: TensorData::Fp32(m.iter().map(|&v| v as f32).collect()),
        }
    }

    /// Decode a 2-D tensor of any float dtype to f64.
    pub fn to_f64_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "tensor {} has shape {:?}, expected a matrix",
                self.name, self.shape
            )));
        }
        let values: Vec<f64> = match &self.data {
            TensorData::Fp32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::Bf16(v) => v.iter().map(|x| x.to_f64()).collect(),
            TensorData::Fp16(v) => v.iter().map(|x| x.to_f64()).collect(),
            TensorData::Fp8(v) => v.iter().map(|x| x.to_f64()).collect(),
            TensorData::Int4(_) => {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {} holds packed INT4 codes, not floats",
                    self.name
                )))
            }
        };
        Ok(Array2::from_shape_vec((self.shape[0], self.shape[1]), values).expect("checked"))
    }
}

/// A package: tensors plus named recipe documents (arbitrary JSON).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Package {
    pub tensors: Vec<Tensor>,
    pub recipes: BTreeMap<String, serde_json::Value>,
}

impl Package {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn recipe(&self, name: &str) -> Result<&serde_json::Value> {
        self.recipes
            .get(name)
            .ok_or_else(|| Error::MissingRecipe(name.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorHeader>,
    recipes: BTreeMap<String, serde_json::Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serialize a package to bytes.
pub fn package_to_bytes(pkg: &Package) -> Result<Vec<u8>> {
    let mut headers = Vec::with_capacity(pkg.tensors.len());
    let mut payload = Vec::new();
    for t in &pkg.tensors {
        let offset = align_up(payload.len());
        payload.resize(offset, 0);
        let bytes = t.data.to_bytes();
        headers.push(TensorHeader {
            name: t.name.clone(),
            dtype: t.dtype().name().to_string(),
            shape: t.shape.clone(),
            offset: offset as u64,
            length: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        tensors: headers,
        recipes: pkg.recipes.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse a package from bytes, validating the header against the
/// payload.
pub fn package_from_bytes(bytes: &[u8]) -> Result<Package> {
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader("file shorter than preamble".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len =
        u64::from_le_bytes(bytes[8..16].try_into().expect("checked length")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::MalformedHeader("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(Error::MalformedHeader(
            "header extends past end of file".into(),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[align_up(header_end).min(bytes.len())..];

    // Overlap and bounds checks over the declared regions.
    let mut regions: Vec<(u64, u64, &str)> = header
        .tensors
        .iter()
        .map(|t| (t.offset, t.offset + t.length, t.name.as_str()))
        .collect();
    regions.sort();
    for pair in regions.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OverlappingRegions(format!(
                "{} and {}",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in &header.tensors {
        let dtype = DType::parse(&th.dtype)?;
        let numel: usize = th.shape.iter().product();
        let expected = dtype.byte_len(numel) as u64;
        if th.length != expected {
            return Err(Error::MalformedHeader(format!(
                "tensor {}: declared {} bytes, dtype {} with {} elements needs {}",
                th.name,
                th.length,
                dtype.name(),
                numel,
                expected
            )));
        }
        if th.offset % ALIGN as u64 != 0 {
            return Err(Error::MalformedHeader(format!(
                "tensor {}: offset {} is not {}-byte aligned",
                th.name, th.offset, ALIGN
            )));
        }
        let end = (th.offset + th.length) as usize;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                needed: end,
                available: payload.len(),
            });
        }
        let raw = &payload[th.offset as usize..end];
        tensors.push(Tensor {
            name: th.name.clone(),
            shape: th.shape.clone(),
            data: TensorData::from_bytes(dtype, raw, numel),
        });
    }
    Ok(Package {
        tensors,
        recipes: header.recipes,
    })
}

/// Write a package to a file.
pub fn write_package(pkg: &Package, path: impl AsRef<Path>) -> Result<()> {
    let bytes = package_to_bytes(pkg)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a package from a file.
pub fn read_package(path: impl AsRef<Path>) -> Result<Package> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    package_from_bytes(&bytes)
}

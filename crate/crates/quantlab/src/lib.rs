//! A desk-scale numerical laboratory for INT4 x FP8 mixed-precision
//! post-training quantization.
//!
//! The crate emulates, bit-exactly and entirely on the CPU, the numerics
//! of a low-precision inference stack: narrow float formats, group-wise
//! INT4 weight quantization with FP8 scales, FP8 activation quantization,
//! outlier-smoothing calibration for linear and attention layers,
//! LUT-based dequantization feeding a mixed-precision GEMM with FP32
//! accumulation, and an online-softmax tiled attention under a
//! configurable precision policy. A toy transformer block wires the
//! pieces together, and a small container format plus CLI make runs
//! reproducible from the command line.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};

pub mod quant;
pub mod rope;
pub mod smoothing;
pub mod attention;
pub mod gemm;
pub mod block;
pub mod synth;
pub mod tensorio;

//! Bit-exact software emulation of the narrow scalar formats used by the
//! rest of the crate: FP8 E4M3, BF16, FP16, plus packed INT4 codes.
//!
//! Each format is a newtype over its raw bit pattern. Decoding to `f64` is
//! exact; encoding rounds onto the destination grid in software (no
//! hardware half/bfloat support is assumed), so results are reproducible
//! across platforms. Equality on the newtypes is bit equality.

use serde::{Deserialize, Serialize};

/// Rounding mode used when encoding a real value onto a format grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Round to nearest, ties to even mantissa.
    NearestEven,
    /// Truncate toward zero. Never increases magnitude.
    TowardZero,
}

/// Nearest integer with ties to even (the `round()` used for INT4 codes).
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Largest finite FP8 E4M3 magnitude, `1.75 * 2^8`.
pub const FP8_MAX: f64 = 448.0;
/// Smallest positive FP8 E4M3 subnormal, `2^-9`.
pub const FP8_MIN_SUBNORMAL: f64 = 0.001953125;
/// Smallest positive FP8 E4M3 normal, `2^-6`.
pub const FP8_MIN_NORMAL: f64 = 0.015625;
/// Group-max threshold below which an FP8 scale truncates to zero:
/// `max|w| < 7 * 2^-9` implies `max|w|/7 < 2^-9`, under the smallest
/// representable FP8 subnormal.
pub const FP8_SCALE_UNDERFLOW_THRESHOLD: f64 = 7.0 * FP8_MIN_SUBNORMAL;

/// Largest finite BF16 magnitude, `(2 - 2^-7) * 2^127`.
pub const BF16_MAX: f64 = 255.0 / 128.0 * 1.7014118346046923e38; // 1.9921875 * 2^127
/// Largest finite FP16 magnitude.
pub const FP16_MAX: f64 = 65504.0;

#[inline]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

#[inline]
fn floor_log2(a: f64) -> i32 {
    debug_assert!(a.is_finite() && a >= pow2(-1022));
    (((a.to_bits() >> 52) & 0x7ff) as i32) - 1023
}

/// Round finite `x` onto the grid of a binary float format with
/// `mant_bits` fraction bits, minimum normal exponent `e_min`, and largest
/// finite value `max_finite`. Returns the exact grid value (signed zero
/// preserved); magnitudes beyond `max_finite` saturate under both modes.
fn round_to_grid(x: f64, mant_bits: u32, e_min: i32, max_finite: f64, mode: Rounding) -> f64 {
    let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
    let a = x.abs();
    if a == 0.0 {
        return sign * 0.0;
    }
    if a > max_finite {
        return sign * max_finite;
    }
    if a < pow2(-1022) {
        // f64 subnormals sit far below half of any grid step handled here.
        return sign * 0.0;
    }
    let e = floor_log2(a).max(e_min);
    let quantum = pow2(e - mant_bits as i32);
    let steps = a / quantum; // exact: power-of-two division
    let n = match mode {
        Rounding::NearestEven => round_half_even(steps),
        Rounding::TowardZero => steps.trunc(),
    };
    let v = n * quantum; // exact: n carries at most mant_bits+1 significant bits
    if v > max_finite {
        sign * max_finite
    } else {
        sign * v
    }
}

/// Split an exact grid value into (sign, exponent field, mantissa field).
fn split_grid_value(v: f64, mant_bits: u32, bias: i32) -> (bool, u32, u32) {
    let sign = v.is_sign_negative();
    let a = v.abs();
    if a == 0.0 {
        return (sign, 0, 0);
    }
    let e_min = 1 - bias;
    let e = floor_log2(a);
    if e < e_min {
        let mant = (a / pow2(e_min - mant_bits as i32)) as u32;
        (sign, 0, mant)
    } else {
        let frac = (a / pow2(e - mant_bits as i32)) as u32;
        (sign, (e + bias) as u32, frac - (1 << mant_bits))
    }
}

/// Exact value of (exponent field, mantissa field) under IEEE-style
/// subnormal semantics.
fn decode_fields(exp_field: u32, mant_field: u32, mant_bits: u32, bias: i32) -> f64 {
    if exp_field == 0 {
        mant_field as f64 * pow2(1 - bias - mant_bits as i32)
    } else {
        ((1u32 << mant_bits) + mant_field) as f64 * pow2(exp_field as i32 - bias - mant_bits as i32)
    }
}

/// FP8 E4M3: 1 sign, 4 exponent, 3 mantissa bits, bias 7.
///
/// Finite range [-448, 448]; smallest positive subnormal `2^-9`; one NaN
/// payload per sign (all-ones exponent and mantissa); no infinities.
/// Overflow saturates to the largest finite magnitude.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Fp8E4M3(u8);

impl Fp8E4M3 {
    const MANT_BITS: u32 = 3;
    const BIAS: i32 = 7;
    const E_MIN: i32 = -6;

    pub const ZERO: Self = Self(0x00);
    pub const ONE: Self = Self(0x38);
    pub const MAX: Self = Self(0x7E);
    pub const MIN_POSITIVE_SUBNORMAL: Self = Self(0x01);
    pub const NAN: Self = Self(0x7F);

    #[inline]
    pub const fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u8 {
        self.0
    }

    /// Encode a real value under the given rounding mode.
    ///
    /// NaN inputs yield the canonical (positive) NaN code; magnitudes
    /// above 448 saturate to the largest finite value.
    pub fn encode(x: f64, mode: Rounding) -> Self {
        if x.is_nan() {
            // Canonical NaN: the sign of an f64 NaN product is not
            // reproducible across evaluation contexts.
            return Self::NAN;
        }
        let v = round_to_grid(x, Self::MANT_BITS, Self::E_MIN, FP8_MAX, mode);
        let (sign, exp, mant) = split_grid_value(v, Self::MANT_BITS, Self::BIAS);
        Self(((sign as u8) << 7) | ((exp as u8) << 3) | mant as u8)
    }

    /// Encode with round-to-nearest-even.
    #[inline]
    pub fn from_f64(x: f64) -> Self {
        Self::encode(x, Rounding::NearestEven)
    }

    /// Exact value of the code; the NaN codes decode to NaN.
    pub fn to_f64(self) -> f64 {
        if self.is_nan() {
            return f64::NAN;
        }
        let exp = ((self.0 >> 3) & 0x0F) as u32;
        let mant = (self.0 & 0x07) as u32;
        let v = decode_fields(exp, mant, Self::MANT_BITS, Self::BIAS);
        if self.0 & 0x80 != 0 {
            -v
        } else {
            v
        }
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }
}

impl std::fmt::Debug for Fp8E4M3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fp8E4M3({} = {:#04x})", self.to_f64(), self.0)
    }
}

/// BF16: 1 sign, 8 exponent, 7 mantissa bits, bias 127.
///
/// Encoding rounds to nearest-even and saturates at the largest finite
/// value (no infinities are produced); NaN propagates.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    const MANT_BITS: u32 = 7;
    const BIAS: i32 = 127;
    const E_MIN: i32 = -126;

    pub const ZERO: Self = Self(0x0000);
    pub const ONE: Self = Self(0x3F80);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn encode(x: f64, mode: Rounding) -> Self {
        if x.is_nan() {
            return Self(0x7FC0);
        }
        let v = round_to_grid(x, Self::MANT_BITS, Self::E_MIN, BF16_MAX, mode);
        let (sign, exp, mant) = split_grid_value(v, Self::MANT_BITS, Self::BIAS);
        Self(((sign as u16) << 15) | ((exp as u16) << 7) | mant as u16)
    }

    /// Encode with round-to-nearest-even.
    #[inline]
    pub fn from_f64(x: f64) -> Self {
        Self::encode(x, Rounding::NearestEven)
    }

    pub fn to_f64(self) -> f64 {
        let exp = ((self.0 >> 7) & 0xFF) as u32;
        let mant = (self.0 & 0x7F) as u32;
        if exp == 0xFF {
            let v = if mant == 0 { f64::INFINITY } else { f64::NAN };
            return if self.0 & 0x8000 != 0 { -v } else { v };
        }
        let v = decode_fields(exp, mant, Self::MANT_BITS, Self::BIAS);
        if self.0 & 0x8000 != 0 {
            -v
        } else {
            v
        }
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x7F) != 0
    }
}

impl std::fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bf16({} = {:#06x})", self.to_f64(), self.0)
    }
}

/// FP16 (IEEE binary16): 1 sign, 5 exponent, 10 mantissa bits, bias 15.
///
/// Encoding saturates at 65504; NaN propagates. Used by the attention
/// precision policy only.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Fp16(u16);

impl Fp16 {
    const MANT_BITS: u32 = 10;
    const BIAS: i32 = 15;
    const E_MIN: i32 = -14;

    pub const ZERO: Self = Self(0x0000);
    pub const ONE: Self = Self(0x3C00);
    pub const MAX: Self = Self(0x7BFF);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn encode(x: f64, mode: Rounding) -> Self {
        if x.is_nan() {
            return Self(0x7E00);
        }
        let v = round_to_grid(x, Self::MANT_BITS, Self::E_MIN, FP16_MAX, mode);
        let (sign, exp, mant) = split_grid_value(v, Self::MANT_BITS, Self::BIAS);
        Self(((sign as u16) << 15) | ((exp as u16) << 10) | mant as u16)
    }

    /// Encode with round-to-nearest-even.
    #[inline]
    pub fn from_f64(x: f64) -> Self {
        Self::encode(x, Rounding::NearestEven)
    }

    pub fn to_f64(self) -> f64 {
        let exp = ((self.0 >> 10) & 0x1F) as u32;
        let mant = (self.0 & 0x3FF) as u32;
        if exp == 0x1F {
            let v = if mant == 0 { f64::INFINITY } else { f64::NAN };
            return if self.0 & 0x8000 != 0 { -v } else { v };
        }
        let v = decode_fields(exp, mant, Self::MANT_BITS, Self::BIAS);
        if self.0 & 0x8000 != 0 {
            -v
        } else {
            v
        }
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        (self.0 & 0x7C00) == 0x7C00 && (self.0 & 0x3FF) != 0
    }
}

impl std::fmt::Debug for Fp16 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fp16({} = {:#06x})", self.to_f64(), self.0)
    }
}

/// Scalar storage format selector used by precision policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarFormat {
    Fp32,
    Fp16,
    Bf16,
    Fp8E4M3,
}

impl ScalarFormat {
    /// Round-trip `x` through the format with nearest-even rounding.
    pub fn round(self, x: f64) -> f64 {
        match self {
            ScalarFormat::Fp32 => x as f32 as f64,
            ScalarFormat::Fp16 => Fp16::from_f64(x).to_f64(),
            ScalarFormat::Bf16 => Bf16::from_f64(x).to_f64(),
            ScalarFormat::Fp8E4M3 => Fp8E4M3::from_f64(x).to_f64(),
        }
    }

    /// Most negative value the format can hold, used to mask scores.
    /// Finite formats return their most negative finite value.
    pub fn most_negative(self) -> f64 {
        match self {
            ScalarFormat::Fp32 => f64::NEG_INFINITY,
            ScalarFormat::Fp16 => -FP16_MAX,
            ScalarFormat::Bf16 => -BF16_MAX,
            ScalarFormat::Fp8E4M3 => -FP8_MAX,
        }
    }
}

/// Inclusive INT4 code range.
pub const INT4_MIN: i32 = -8;
pub const INT4_MAX: i32 = 7;

/// Pack signed INT4 codes two per byte, low nibble first. The high nibble
/// of a trailing odd byte is zero.
pub fn pack_int4(codes: &[i8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() == 2 {
            (pair[1] as u8) & 0x0F
        } else {
            0
        };
        out.push(lo | (hi << 4));
    }
    out
}

/// Unpack `numel` signed INT4 codes (low nibble first, sign-extended).
pub fn unpack_int4(bytes: &[u8], numel: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let byte = bytes[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        out.push(((nibble as i8) << 4) >> 4);
    }
    out
}

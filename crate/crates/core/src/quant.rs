//! Uniform round quantization of DCT blocks and LSB-first code packing.
//!
//! A block quantized at `B >= 1` bits stores its range `[lo, hi]` and one code
//! per coefficient: `code = floor((x - lo) / step + 0.5)` with
//! `step = (hi - lo) / (2^B - 1)`, and dequantizes to `lo + code * step`.
//! Stored ranges are rounded outward to the range dtype, so every coefficient
//! stays inside the stored range and the half-step error bound holds against
//! the values actually written to disk.
//!
//! A 0-bit block stores no codes; both range bounds hold a single mean value.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Precision used to store per-block range bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RangeDtype {
    #[default]
    F32,
    F16,
}

impl RangeDtype {
    pub fn bits(self) -> u32 {
        match self {
            RangeDtype::F32 => 32,
            RangeDtype::F16 => 16,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RangeDtype::F32 => "f32",
            RangeDtype::F16 => "f16",
        }
    }

    fn finite(self, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(Some(format!("{} range bound", self.as_str()))))
        }
    }

    /// Nearest representable value.
    pub fn round_nearest(self, x: f64) -> Result<f64> {
        let v = match self {
            RangeDtype::F32 => f64::from(x as f32),
            RangeDtype::F16 => half::f16::from_f64(x).to_f64(),
        };
        self.finite(v)
    }

    /// Largest representable value `<= x`.
    pub fn round_down(self, x: f64) -> Result<f64> {
        let v = match self {
            RangeDtype::F32 => {
                let y = x as f32;
                if f64::from(y) > x { y.next_down() } else { y }.into()
            }
            RangeDtype::F16 => {
                let y = half::f16::from_f64(x);
                if y.to_f64() > x { f16_step(y, false) } else { y }.to_f64()
            }
        };
        self.finite(v)
    }

    /// Smallest representable value `>= x`.
    pub fn round_up(self, x: f64) -> Result<f64> {
        let v = match self {
            RangeDtype::F32 => {
                let y = x as f32;
                if f64::from(y) < x { y.next_up() } else { y }.into()
            }
            RangeDtype::F16 => {
                let y = half::f16::from_f64(x);
                if y.to_f64() < x { f16_step(y, true) } else { y }.to_f64()
            }
        };
        self.finite(v)
    }

    /// Little-endian bytes of a value already representable in this dtype.
    pub fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            RangeDtype::F32 => out.extend((v as f32).to_le_bytes()),
            RangeDtype::F16 => out.extend(half::f16::from_f64(v).to_le_bytes()),
        }
    }

    pub fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            RangeDtype::F32 => f64::from(f32::from_le_bytes(bytes[..4].try_into().unwrap())),
            RangeDtype::F16 => half::f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
        }
    }
}

// Adjacent finite f16 in the given direction (inputs are finite).
fn f16_step(v: half::f16, up: bool) -> half::f16 {
    let bits = v.to_bits();
    let negative = bits & 0x8000 != 0;
    let magnitude = bits & 0x7FFF;
    let next = match (magnitude == 0, negative, up) {
        (true, _, true) => 0x0001,
        (true, _, false) => 0x8001,
        (false, false, true) | (false, true, false) => bits + 1,
        (false, false, false) | (false, true, true) => bits - 1,
    };
    half::f16::from_bits(next)
}

/// How a 0-bit block is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ZeroBitMode {
    /// Range bounds hold the spatial-domain mean; reconstruction is that
    /// constant, without an inverse transform.
    #[default]
    SpatialMean,
    /// Range bounds hold the mean DCT coefficient; reconstruction fills the
    /// DCT block with it and applies the inverse transform.
    DctMean,
}

impl ZeroBitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ZeroBitMode::SpatialMean => "spatial-mean",
            ZeroBitMode::DctMean => "dct-mean",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            ZeroBitMode::SpatialMean => 0,
            ZeroBitMode::DctMean => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ZeroBitMode::SpatialMean),
            1 => Some(ZeroBitMode::DctMean),
            _ => None,
        }
    }

    /// Whether a dequantized block at `bits` is in the DCT domain.
    pub fn needs_inverse(self, bits: u8) -> bool {
        bits > 0 || self == ZeroBitMode::DctMean
    }
}

/// Number of quantization steps, `2^B - 1`.
#[inline]
pub fn max_code(bits: u8) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

#[inline]
pub fn step_size(lo: f64, hi: f64, bits: u8) -> f64 {
    (hi - lo) / f64::from(max_code(bits))
}

/// A block of quantized coefficients with its stored range.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPatch {
    pub bits: u8,
    pub lo: f64,
    pub hi: f64,
    pub codes: Vec<u32>,
}

impl QuantizedPatch {
    pub fn step(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            step_size(self.lo, self.hi, self.bits)
        }
    }

    /// Value represented by `code`.
    #[inline]
    pub fn level(&self, code: u32) -> f64 {
        if self.hi == self.lo {
            self.lo
        } else {
            self.lo + f64::from(code) * self.step()
        }
    }
}

/// Quantizes arbitrary values at `bits >= 1` over their own min/max range.
/// Returns `(lo, hi, codes)`.
pub fn quantize_values(values: &[f64], bits: u8, range: RangeDtype) -> Result<(f64, f64, Vec<u32>)> {
    if bits > 32 {
        return Err(Error::BitWidthTooLarge(u32::from(bits)));
    }
    if bits == 0 {
        return Err(Error::InvalidBitPlan("quantize_values needs at least 1 bit".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(Some("quantizer input".into())));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if min == max {
        let c = range.round_nearest(min)?;
        return Ok((c, c, vec![0; values.len()]));
    }
    let lo = range.round_down(min)?;
    let hi = range.round_up(max)?;
    let top = f64::from(max_code(bits));
    let step = (hi - lo) / top;
    let codes = values
        .iter()
        .map(|&x| ((x - lo) / step + 0.5).floor().clamp(0.0, top) as u32)
        .collect();
    Ok((lo, hi, codes))
}

/// Quantizes one DCT block at `bits`.
///
/// `spatial_mean` is the mean of the block before the transform; it is only
/// used for 0-bit blocks in [`ZeroBitMode::SpatialMean`].
pub fn quantize_patch(
    coeffs: &Matrix<f64>,
    bits: u8,
    spatial_mean: f64,
    mode: ZeroBitMode,
    range: RangeDtype,
) -> Result<QuantizedPatch> {
    if bits > 32 {
        return Err(Error::BitWidthTooLarge(u32::from(bits)));
    }
    if coeffs.as_slice().iter().any(|v| !v.is_finite()) || !spatial_mean.is_finite() {
        return Err(Error::NonFinite(Some("DCT block".into())));
    }
    if bits == 0 {
        let mean = match mode {
            ZeroBitMode::SpatialMean => spatial_mean,
            ZeroBitMode::DctMean => {
                coeffs.as_slice().iter().sum::<f64>() / coeffs.len().max(1) as f64
            }
        };
        let c = range.round_nearest(mean)?;
        return Ok(QuantizedPatch {
            bits,
            lo: c,
            hi: c,
            codes: Vec::new(),
        });
    }
    let (lo, hi, codes) = quantize_values(coeffs.as_slice(), bits, range)?;
    Ok(QuantizedPatch { bits, lo, hi, codes })
}

/// Maps codes back to values. For 0-bit blocks this is the constant block
/// holding `lo`; see [`ZeroBitMode::needs_inverse`] for its domain.
pub fn dequantize_patch(qp: &QuantizedPatch, p: usize) -> Result<Matrix<f64>> {
    if qp.bits > 32 {
        return Err(Error::BitWidthTooLarge(u32::from(qp.bits)));
    }
    if qp.lo > qp.hi || !qp.lo.is_finite() || !qp.hi.is_finite() {
        return Err(Error::CorruptArchive(format!(
            "invalid block range [{}, {}]",
            qp.lo, qp.hi
        )));
    }
    if qp.bits == 0 {
        if !qp.codes.is_empty() {
            return Err(Error::DimensionMismatch("0-bit block carries codes".into()));
        }
        return Ok(Matrix::from_fn(p, p, |_, _| qp.lo));
    }
    if qp.codes.len() != p * p {
        return Err(Error::DimensionMismatch(format!(
            "block has {} codes, expected {}",
            qp.codes.len(),
            p * p
        )));
    }
    let top = max_code(qp.bits);
    if let Some(&code) = qp.codes.iter().find(|&&c| c > top) {
        return Err(Error::CodeOutOfRange {
            code,
            bits: u32::from(qp.bits),
        });
    }
    let values = qp.codes.iter().map(|&c| qp.level(c)).collect();
    Matrix::from_vec(p, p, values)
}

/// Bytes needed for `count` codes of `bits` each.
#[inline]
pub fn packed_len(bits: u8, count: usize) -> usize {
    (usize::from(bits) * count).div_ceil(8)
}

/// Packs codes LSB-first into a byte-aligned stream.
pub fn pack_codes(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    if bits == 0 || bits > 32 {
        return Err(Error::BitWidthTooLarge(u32::from(bits)));
    }
    let top = max_code(bits);
    let mut out = Vec::with_capacity(packed_len(bits, codes.len()));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &code in codes {
        if code > top {
            return Err(Error::CodeOutOfRange {
                code,
                bits: u32::from(bits),
            });
        }
        acc |= u64::from(code) << filled;
        filled += u32::from(bits);
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    if bits == 0 || bits > 32 {
        return Err(Error::BitWidthTooLarge(u32::from(bits)));
    }
    let needed = packed_len(bits, count);
    if bytes.len() < needed {
        return Err(Error::PackedTooShort {
            needed,
            available: bytes.len(),
        });
    }
    let mask = u64::from(max_code(bits));
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut next = bytes.iter();
    for _ in 0..count {
        while filled < u32::from(bits) {
            acc |= u64::from(*next.next().unwrap()) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= u32::from(bits);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXACT: RangeDtype = RangeDtype::F32;

    #[test]
    fn hand_worked_two_bit_example() {
        let c = Matrix::from_rows(&[[-1.0, 0.2], [1.0, 0.0]]);
        let q = quantize_patch(&c, 2, 0.0, ZeroBitMode::SpatialMean, EXACT).unwrap();
        assert_eq!((q.lo, q.hi), (-1.0, 1.0));
        assert_eq!(q.codes[1], 2);
        let d = dequantize_patch(&q, 2).unwrap();
        assert!((d.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_block_is_exact() {
        let c = Matrix::from_fn(3, 3, |_, _| 0.75);
        let q = quantize_patch(&c, 2, 0.0, ZeroBitMode::SpatialMean, EXACT).unwrap();
        assert_eq!(q.lo, q.hi);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(dequantize_patch(&q, 3).unwrap(), c);
    }

    #[test]
    fn zero_bit_spatial_mean() {
        let spatial = Matrix::from_rows(&[[1.0, 3.0], [5.0, 7.0]]);
        let mean = spatial.as_slice().iter().sum::<f64>() / 4.0;
        let coeffs = crate::dct::dct2(&spatial).unwrap();
        let q = quantize_patch(&coeffs, 0, mean, ZeroBitMode::SpatialMean, EXACT).unwrap();
        assert_eq!((q.lo, q.hi), (4.0, 4.0));
        assert!(q.codes.is_empty());
        assert_eq!(dequantize_patch(&q, 2).unwrap(), Matrix::from_fn(2, 2, |_, _| 4.0));
        assert!(!ZeroBitMode::SpatialMean.needs_inverse(0));
    }

    #[test]
    fn zero_bit_dct_mean() {
        let coeffs = Matrix::from_rows(&[[8.0, -2.0], [-4.0, 0.0]]);
        let q = quantize_patch(&coeffs, 0, 123.0, ZeroBitMode::DctMean, EXACT).unwrap();
        assert_eq!((q.lo, q.hi), (0.5, 0.5));
        assert!(ZeroBitMode::DctMean.needs_inverse(0));
    }

    #[test]
    fn one_bit_two_point_range_is_exact() {
        let c = Matrix::from_rows(&[[-2.0, 2.0], [2.0, -2.0]]);
        let q = quantize_patch(&c, 1, 0.0, ZeroBitMode::SpatialMean, EXACT).unwrap();
        assert_eq!(q.codes, vec![0, 1, 1, 0]);
        assert_eq!(dequantize_patch(&q, 2).unwrap(), c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]);
        assert!(quantize_patch(&c, 2, 0.0, ZeroBitMode::SpatialMean, EXACT).is_err());
        let ok = Matrix::<f64>::zeros(2, 2);
        assert!(matches!(
            quantize_patch(&ok, 33, 0.0, ZeroBitMode::SpatialMean, EXACT),
            Err(Error::BitWidthTooLarge(33))
        ));
        let bad = QuantizedPatch { bits: 2, lo: 0.0, hi: 1.0, codes: vec![0, 1, 4, 0] };
        assert!(matches!(dequantize_patch(&bad, 2), Err(Error::CodeOutOfRange { code: 4, .. })));
        let short = QuantizedPatch { bits: 2, lo: 0.0, hi: 1.0, codes: vec![0, 1] };
        assert!(dequantize_patch(&short, 2).is_err());
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[1, 2, 3, 0], 2).unwrap(), vec![0x39]);
        assert_eq!(pack_codes(&[255], 8).unwrap(), vec![0xFF]);
        assert_eq!(pack_codes(&[0x1FF], 9).unwrap(), vec![0xFF, 0x01]);
        assert_eq!(pack_codes(&[1, 1, 1], 3).unwrap(), vec![0b0100_1001, 0]);
        assert!(pack_codes(&[4], 2).is_err());
        assert!(matches!(
            unpack_codes(&[0x39], 2, 5),
            Err(Error::PackedTooShort { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn range_rounding_is_outward() {
        let x = 0.1f64;
        for r in [RangeDtype::F32, RangeDtype::F16] {
            assert!(r.round_down(x).unwrap() <= x);
            assert!(r.round_up(x).unwrap() >= x);
            assert!(r.round_down(-x).unwrap() <= -x);
            assert!(r.round_up(-x).unwrap() >= -x);
            assert_eq!(r.round_down(0.5).unwrap(), 0.5);
        }
        assert!(RangeDtype::F16.round_up(1e6).is_err());
        // Tiny magnitudes round outward across zero.
        assert!(RangeDtype::F16.round_down(1e-9).unwrap() == 0.0);
        assert!(RangeDtype::F16.round_up(1e-9).unwrap() > 0.0);
        assert!(RangeDtype::F16.round_down(-1e-9).unwrap() < 0.0);
    }

    #[test]
    fn finer_bits_stay_within_coarser_bound() {
        // Max error is not strictly monotone in B for adversarial inputs:
        // {-1, -1/3, 1/3, 1} is exact at 2 bits but not at 3. What does hold
        // is that the B+1 error never exceeds the B-bit worst-case bound.
        let v = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        let err = |b: u8| {
            let (lo, hi, codes) = quantize_values(&v, b, EXACT).unwrap();
            let step = step_size(lo, hi, b);
            v.iter().zip(&codes).map(|(x, &c)| (x - (lo + f64::from(c) * step)).abs()).fold(0.0, f64::max)
        };
        assert!(err(2) < 1e-7);
        assert!(err(3) > err(2));
        assert!(err(3) <= 2.0 / 3.0 / 2.0);
    }

    fn block() -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-50.0f64..50.0, 16).prop_map(|v| Matrix::from_vec(4, 4, v).unwrap())
    }

    proptest! {
        #[test]
        fn error_within_half_step(c in block(), bits in 1u8..=32, f16 in any::<bool>()) {
            let r = if f16 { RangeDtype::F16 } else { RangeDtype::F32 };
            let q = quantize_patch(&c, bits, 0.0, ZeroBitMode::SpatialMean, r).unwrap();
            prop_assert!(q.codes.iter().all(|&x| x <= max_code(bits)));
            let d = dequantize_patch(&q, 4).unwrap();
            let bound = (q.hi - q.lo) / (2.0 * f64::from(max_code(bits))) + 1e-9;
            for (x, y) in c.as_slice().iter().zip(d.as_slice()) {
                prop_assert!((x - y).abs() <= bound, "{x} vs {y}, bound {bound}");
            }
        }

        #[test]
        fn spatial_mean_is_preserved(v in proptest::collection::vec(-5.0f32..5.0, 9)) {
            let x = Matrix::from_vec(3, 3, v).unwrap().to_f64();
            let mean = x.as_slice().iter().sum::<f64>() / 9.0;
            let q = quantize_patch(&crate::dct::dct2(&x).unwrap(), 0, mean, ZeroBitMode::SpatialMean, RangeDtype::F32).unwrap();
            let d = dequantize_patch(&q, 3).unwrap();
            // A constant block's mean is its value.
            prop_assert!(d.as_slice().iter().all(|&v| v == f64::from(mean as f32)));
        }

        #[test]
        fn pack_round_trip(bits in 1u8..=32, raw in proptest::collection::vec(any::<u32>(), 0..100)) {
            let codes: Vec<u32> = raw.iter().map(|c| c & max_code(bits)).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(bits, codes.len()));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }
    }
}

//! Data-free reference codecs.
//!
//! * Sign quantization: `α · where(ΔW > 0, +1, -1)` with `α = mean |ΔW|`.
//! * SVD mixed precision: `ΔW = U S Vᵀ`; groups of singular vectors are
//!   round-quantized at decreasing bit widths (e.g. 8/3/2) and vectors past
//!   the last group are dropped.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::patch::{BitLevel, BitPlan};
use crate::quant::{self, packed_len, RangeDtype};
use crate::reader::ByteReader;

/// Sign-quantized delta: one bit per parameter and one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SignCompressed {
    pub shape: (usize, usize),
    /// Bit `i` (LSB-first) is 1 iff element `i` is positive.
    pub bitmap: Vec<u8>,
    pub alpha: f32,
}

pub fn sign_compress(delta: &Matrix<f32>) -> Result<SignCompressed> {
    if delta.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !delta.all_finite() {
        return Err(Error::NonFinite(Some("sign codec input".into())));
    }
    let abs_sum: f64 = delta.as_slice().iter().map(|v| f64::from(v.abs())).sum();
    let alpha = (abs_sum / delta.len() as f64) as f32;
    let signs: Vec<u32> = delta.as_slice().iter().map(|&v| u32::from(v > 0.0)).collect();
    Ok(SignCompressed {
        shape: delta.shape(),
        bitmap: quant::pack_codes(&signs, 1)?,
        alpha,
    })
}

pub fn sign_reconstruct(sc: &SignCompressed) -> Result<Matrix<f32>> {
    let (rows, cols) = sc.shape;
    let signs = quant::unpack_codes(&sc.bitmap, 1, rows * cols)?;
    let data = signs
        .into_iter()
        .map(|s| if s == 1 { sc.alpha } else { -sc.alpha })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// A contiguous block of singular vectors sharing one bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvdGroupSpec {
    pub begin: usize,
    pub end: usize,
    pub bits: u8,
}

/// Quantized singular vector pair: `u` is a column of U, `sv` the matching
/// row of `S Vᵀ`. Each carries its own range.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVectorPair {
    pub u_range: (f64, f64),
    pub u_codes: Vec<u32>,
    pub sv_range: (f64, f64),
    pub sv_codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdGroup {
    pub spec: SvdGroupSpec,
    pub vectors: Vec<QuantizedVectorPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdMixedCompressed {
    pub shape: (usize, usize),
    pub range_dtype: RangeDtype,
    pub groups: Vec<SvdGroup>,
}

pub fn validate_groups(groups: &[SvdGroupSpec], shape: (usize, usize)) -> Result<()> {
    let rank = shape.0.min(shape.1);
    let mut prev: Option<&SvdGroupSpec> = None;
    for g in groups {
        if g.begin > g.end || g.end > rank {
            return Err(Error::InvalidGroups(format!(
                "rank range {}..{} invalid for rank {rank}",
                g.begin, g.end
            )));
        }
        if g.bits == 0 || g.bits > 32 {
            return Err(Error::InvalidGroups(format!("bit width {} not in 1..=32", g.bits)));
        }
        if let Some(p) = prev {
            if g.begin < p.end {
                return Err(Error::InvalidGroups(format!(
                    "rank range {}..{} overlaps or precedes {}..{}",
                    g.begin, g.end, p.begin, p.end
                )));
            }
            if g.bits >= p.bits {
                return Err(Error::InvalidGroups("bit widths must descend across groups".into()));
            }
        }
        prev = Some(g);
    }
    Ok(())
}

// Bit widths and relative rank counts of the default split.
const DEFAULT_GROUP_BITS: [u8; 3] = [8, 3, 2];
const DEFAULT_GROUP_WEIGHTS: [f64; 3] = [1.0, 8.0, 16.0];

/// Default 8/3/2-bit rank split sized to roughly one bit per parameter.
///
/// Each kept rank costs `(rows + cols) * bits`; ranks are split 1:8:16 across
/// the 8-, 3- and 2-bit groups, which averages 2.56 bits per vector element.
/// Range overhead is not part of the budget.
pub fn default_svd_groups(shape: (usize, usize)) -> Vec<SvdGroupSpec> {
    let (rows, cols) = shape;
    let total_weight: f64 = DEFAULT_GROUP_WEIGHTS.iter().sum();
    let avg_bits: f64 = DEFAULT_GROUP_BITS
        .iter()
        .zip(DEFAULT_GROUP_WEIGHTS)
        .map(|(&b, w)| f64::from(b) * w)
        .sum::<f64>()
        / total_weight;
    let budget_ranks = ((rows * cols) as f64 / (avg_bits * (rows + cols) as f64)).floor() as usize;
    let ranks = budget_ranks.min(rows.min(cols));
    let plan = BitPlan {
        levels: DEFAULT_GROUP_BITS
            .iter()
            .zip(DEFAULT_GROUP_WEIGHTS)
            .map(|(&bits, w)| BitLevel {
                bits,
                ratio: w / total_weight,
            })
            .collect(),
        per_patch: None,
    };
    let mut begin = 0;
    plan.level_counts(ranks)
        .into_iter()
        .zip(DEFAULT_GROUP_BITS)
        .map(|(count, bits)| {
            let g = SvdGroupSpec {
                begin,
                end: begin + count,
                bits,
            };
            begin += count;
            g
        })
        .collect()
}

/// Singular value decomposition with values in descending order and each
/// left singular vector's largest-magnitude entry made non-negative.
type SvdFactors = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Returns `(U columns, singular values, V columns)`.
fn canonical_svd(delta: &Matrix<f32>) -> Result<SvdFactors> {
    let (rows, cols) = delta.shape();
    let m = DMatrix::from_row_iterator(rows, cols, delta.as_slice().iter().map(|&v| f64::from(v)));
    let svd = m.try_svd(true, true, f64::EPSILON, 10_000).ok_or(Error::SvdFailure)?;
    let u = svd.u.ok_or(Error::SvdFailure)?;
    let v_t = svd.v_t.ok_or(Error::SvdFailure)?;
    let k = svd.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut us = Vec::with_capacity(k);
    let mut ss = Vec::with_capacity(k);
    let mut vs = Vec::with_capacity(k);
    for i in order {
        let mut uc: Vec<f64> = u.column(i).iter().copied().collect();
        let mut vc: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = uc
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |(bi, bv), (j, &x)| {
                if x.abs() > bv {
                    (j, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if uc[pivot] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
        us.push(uc);
        ss.push(svd.singular_values[i]);
        vs.push(vc);
    }
    Ok((us, ss, vs))
}

pub fn svd_mixed_compress(
    delta: &Matrix<f32>,
    groups: &[SvdGroupSpec],
    range_dtype: RangeDtype,
) -> Result<SvdMixedCompressed> {
    if delta.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !delta.all_finite() {
        return Err(Error::NonFinite(Some("svd codec input".into())));
    }
    validate_groups(groups, delta.shape())?;
    let needs_svd = groups.iter().any(|g| g.end > g.begin);
    let (us, ss, vs) = if needs_svd {
        canonical_svd(delta)?
    } else {
        Default::default()
    };

    let mut out = Vec::with_capacity(groups.len());
    for &spec in groups {
        let mut vectors = Vec::with_capacity(spec.end - spec.begin);
        for i in spec.begin..spec.end {
            let sv: Vec<f64> = vs[i].iter().map(|x| ss[i] * x).collect();
            let (ulo, uhi, u_codes) = quant::quantize_values(&us[i], spec.bits, range_dtype)?;
            let (slo, shi, sv_codes) = quant::quantize_values(&sv, spec.bits, range_dtype)?;
            vectors.push(QuantizedVectorPair {
                u_range: (ulo, uhi),
                u_codes,
                sv_range: (slo, shi),
                sv_codes,
            });
        }
        out.push(SvdGroup { spec, vectors });
    }
    Ok(SvdMixedCompressed {
        shape: delta.shape(),
        range_dtype,
        groups: out,
    })
}

fn dequantize_vector(range: (f64, f64), codes: &[u32], bits: u8) -> Vec<f64> {
    let qp = quant::QuantizedPatch {
        bits,
        lo: range.0,
        hi: range.1,
        codes: Vec::new(),
    };
    codes.iter().map(|&c| qp.level(c)).collect()
}

pub fn svd_mixed_reconstruct(smc: &SvdMixedCompressed) -> Result<Matrix<f32>> {
    let (rows, cols) = smc.shape;
    let mut acc = vec![0.0f64; rows * cols];
    for g in &smc.groups {
        for v in &g.vectors {
            if v.u_codes.len() != rows || v.sv_codes.len() != cols {
                return Err(Error::DimensionMismatch("singular vector length".into()));
            }
            let u = dequantize_vector(v.u_range, &v.u_codes, g.spec.bits);
            let s = dequantize_vector(v.sv_range, &v.sv_codes, g.spec.bits);
            for (r, &ur) in u.iter().enumerate() {
                let row = &mut acc[r * cols..(r + 1) * cols];
                for (a, &sc) in row.iter_mut().zip(&s) {
                    *a += ur * sc;
                }
            }
        }
    }
    Matrix::from_vec(rows, cols, acc.into_iter().map(|v| v as f32).collect())
}

/// Byte layout of an SVD blob:
/// `u32 group count`, then per group `u32 begin, u32 end, u8 bits`, then per
/// vector `u lo, u hi, sv lo, sv hi` in the range dtype followed by the packed
/// `u` codes and packed `sv` codes (each byte-aligned).
impl SvdMixedCompressed {
    pub fn encode_blob(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend((self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend((g.spec.begin as u32).to_le_bytes());
            out.extend((g.spec.end as u32).to_le_bytes());
            out.push(g.spec.bits);
        }
        for g in &self.groups {
            for v in &g.vectors {
                for x in [v.u_range.0, v.u_range.1, v.sv_range.0, v.sv_range.1] {
                    self.range_dtype.encode(x, &mut out);
                }
                out.extend(quant::pack_codes(&v.u_codes, g.spec.bits)?);
                out.extend(quant::pack_codes(&v.sv_codes, g.spec.bits)?);
            }
        }
        Ok(out)
    }

    pub fn decode_blob(bytes: &[u8], shape: (usize, usize), range_dtype: RangeDtype) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptArchive(format!("svd blob: {what}"));
        let mut rd = ByteReader::new(bytes);
        let count = rd.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        if count > bytes.len() {
            return Err(corrupt("group count"));
        }
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let (begin, end, bits) = (rd.u32(), rd.u32(), rd.u8());
            match (begin, end, bits) {
                (Some(begin), Some(end), Some(bits)) => specs.push(SvdGroupSpec {
                    begin: begin as usize,
                    end: end as usize,
                    bits,
                }),
                _ => return Err(corrupt("truncated")),
            }
        }
        validate_groups(&specs, shape)?;
        let rb = range_dtype.bytes();
        let mut groups = Vec::with_capacity(count);
        for spec in specs {
            if (spec.end - spec.begin).saturating_mul(4 * rb) > rd.remaining() {
                return Err(corrupt("truncated"));
            }
            let mut vectors = Vec::with_capacity(spec.end - spec.begin);
            for _ in spec.begin..spec.end {
                let ranges = rd.take(4 * rb).ok_or_else(|| corrupt("truncated"))?;
                let r = |i: usize| range_dtype.decode(&ranges[i * rb..]);
                let (u_range, sv_range) = ((r(0), r(1)), (r(2), r(3)));
                if !(u_range.0 <= u_range.1 && sv_range.0 <= sv_range.1) {
                    return Err(corrupt("inverted range"));
                }
                let mut codes = |n: usize| -> Result<Vec<u32>> {
                    let raw = rd.take(packed_len(spec.bits, n)).ok_or_else(|| corrupt("truncated"))?;
                    quant::unpack_codes(raw, spec.bits, n)
                };
                let u_codes = codes(shape.0)?;
                let sv_codes = codes(shape.1)?;
                vectors.push(QuantizedVectorPair {
                    u_range,
                    u_codes,
                    sv_range,
                    sv_codes,
                });
            }
            groups.push(SvdGroup { spec, vectors });
        }
        if rd.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            shape,
            range_dtype,
            groups,
        })
    }
}

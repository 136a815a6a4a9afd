//! Per-tensor compression and reconstruction, and whole-checkpoint archives.
//!
//! Compressing one delta matrix:
//!
//! 1. cut it into zero-padded `p x p` patches;
//! 2. score each patch by its L2 norm and allocate bit widths from the plan;
//! 3. DCT each patch and round-quantize it at its width (0-bit patches keep a
//!    single mean value);
//! 4. reconstruct in-process and store the rescale factor
//!    `γ = Σ|ΔW| / Σ|ΔW′|`, which the decoder applies after the inverse DCT.

pub mod format;

use rayon::prelude::*;

use crate::baselines::{self, SignCompressed, SvdMixedCompressed};
use crate::checkpoint::{
    compute_delta, CompressibilityRule, DType, NamedTensorMap, Tensor, DEFAULT_PASSTHROUGH_PATTERNS,
};
use crate::dct::DctBasis;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::patch::{self, BitPlan, PatchGrid};
use crate::quant::{self, QuantizedPatch, RangeDtype, ZeroBitMode};

pub use format::{decode_archive, encode_archive, read_archive, write_archive, FORMAT_VERSION};

/// Which codec produces compressed records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Method {
    #[default]
    Dct,
    Sign,
    Svd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dct => "dct",
            Method::Sign => "sign",
            Method::Svd => "svd",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Method::Dct => 0,
            Method::Sign => 1,
            Method::Svd => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Method::Dct),
            1 => Some(Method::Sign),
            2 => Some(Method::Svd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressConfig {
    pub patch_size: usize,
    pub bit_plan: BitPlan,
    pub range_dtype: RangeDtype,
    pub zero_bit_mode: ZeroBitMode,
    pub passthrough_patterns: Vec<String>,
    pub method: Method,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            bit_plan: BitPlan::headline(),
            range_dtype: RangeDtype::F32,
            zero_bit_mode: ZeroBitMode::SpatialMean,
            passthrough_patterns: DEFAULT_PASSTHROUGH_PATTERNS.iter().map(|s| s.to_string()).collect(),
            method: Method::Dct,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size > patch::MAX_PATCH_SIZE {
            return Err(Error::InvalidPatchSize(self.patch_size));
        }
        self.bit_plan.validate()
    }

    pub fn rule(&self) -> CompressibilityRule {
        CompressibilityRule::new(self.patch_size, self.passthrough_patterns.clone())
    }
}

/// A DCT-compressed delta matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor {
    pub name: String,
    pub shape: (usize, usize),
    pub dtype: DType,
    pub patch_size: usize,
    pub zero_bit_mode: ZeroBitMode,
    pub range_dtype: RangeDtype,
    /// One width per patch, raster order.
    pub bit_widths: Vec<u8>,
    /// `(lo, hi)` per patch, exactly representable in `range_dtype`.
    pub ranges: Vec<(f64, f64)>,
    /// Per-patch packed codes, each patch starting on a byte boundary.
    pub blob: Vec<u8>,
    pub gamma: f32,
}

impl CompressedTensor {
    pub fn patch_count(&self) -> usize {
        self.bit_widths.len()
    }

    /// Byte offset of each patch's codes within the blob, plus the total.
    pub fn patch_offsets(&self) -> Vec<usize> {
        let p2 = self.patch_size * self.patch_size;
        let mut offsets = Vec::with_capacity(self.bit_widths.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for &b in &self.bit_widths {
            at += quant::packed_len(b, p2);
            offsets.push(at);
        }
        offsets
    }

    /// Structural consistency of widths, ranges and blob against the shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTensor {
            name: self.name.clone(),
            reason,
        };
        if self.patch_size == 0 || self.patch_size > patch::MAX_PATCH_SIZE {
            return Err(bad(format!("patch size {} out of range", self.patch_size)));
        }
        let m = patch::patch_count(self.shape, self.patch_size);
        if self.bit_widths.len() != m || self.ranges.len() != m {
            return Err(bad(format!(
                "{} widths / {} ranges for {m} patches",
                self.bit_widths.len(),
                self.ranges.len()
            )));
        }
        if let Some(b) = self.bit_widths.iter().find(|&&b| b > 32) {
            return Err(bad(format!("bit width {b} exceeds 32")));
        }
        for (k, (&(lo, hi), &b)) in self.ranges.iter().zip(&self.bit_widths).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) || (b == 0 && lo != hi) {
                return Err(bad(format!("patch {k} has invalid range [{lo}, {hi}]")));
            }
        }
        let need = *self.patch_offsets().last().unwrap();
        if self.blob.len() != need {
            return Err(bad(format!("blob is {} bytes, expected {need}", self.blob.len())));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(bad(format!("rescale factor {} is not finite and positive", self.gamma)));
        }
        Ok(())
    }
}

fn sum_abs_f32(values: &[f32]) -> f64 {
    values.iter().map(|v| f64::from(v.abs())).sum()
}

/// `Σ|original| / Σ|reconstruction|`, pinned to 1 when either sum is zero.
pub fn rescale_factor(original: &[f32], reconstruction: &[f32]) -> f32 {
    let num = sum_abs_f32(original);
    let den = sum_abs_f32(reconstruction);
    if num == 0.0 || den == 0.0 {
        return 1.0;
    }
    let g = (num / den) as f32;
    if g.is_finite() && g > 0.0 {
        g
    } else {
        1.0
    }
}

/// Compresses one delta matrix with the DCT codec.
///
/// The returned record has an empty name and `F32` dtype; checkpoint-level
/// callers fill those in.
pub fn compress_tensor(delta: &Matrix<f32>, cfg: &CompressConfig) -> Result<CompressedTensor> {
    cfg.validate()?;
    if cfg.method != Method::Dct {
        return Err(Error::InvalidConfig(format!(
            "compress_tensor needs the dct method, got {}",
            cfg.method.as_str()
        )));
    }
    if delta.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !delta.all_finite() {
        return Err(Error::NonFinite(Some("delta matrix".into())));
    }
    let p = cfg.patch_size;
    let grid = patch::patchlize(delta, p)?;
    let scores = patch::importance_scores(&grid);
    let widths = patch::allocate_bits(&scores, &cfg.bit_plan)?
        .per_patch
        .expect("allocation fills per-patch widths");
    let basis = DctBasis::cached(p)?;
    let p2 = (p * p) as f64;

    let quantized: Vec<QuantizedPatch> = grid
        .patches
        .par_iter()
        .zip(widths.par_iter())
        .map(|(block, &bits)| {
            let spatial_mean = block.as_slice().iter().sum::<f64>() / p2;
            // A spatial-mean 0-bit patch never looks at its coefficients.
            let coeffs = if cfg.zero_bit_mode.needs_inverse(bits) {
                basis.forward(block)?
            } else {
                Matrix::zeros(p, p)
            };
            quant::quantize_patch(&coeffs, bits, spatial_mean, cfg.zero_bit_mode, cfg.range_dtype)
        })
        .collect::<Result<_>>()?;

    let packed: Vec<Vec<u8>> = quantized
        .par_iter()
        .map(|q| {
            if q.bits == 0 {
                Ok(Vec::new())
            } else {
                quant::pack_codes(&q.codes, q.bits)
            }
        })
        .collect::<Result<_>>()?;

    let mut ct = CompressedTensor {
        name: String::new(),
        shape: delta.shape(),
        dtype: DType::F32,
        patch_size: p,
        zero_bit_mode: cfg.zero_bit_mode,
        range_dtype: cfg.range_dtype,
        bit_widths: widths,
        ranges: quantized.iter().map(|q| (q.lo, q.hi)).collect(),
        blob: packed.concat(),
        gamma: 1.0,
    };
    let unscaled = reconstruct_unscaled(&ct)?;
    ct.gamma = rescale_factor(delta.as_slice(), unscaled.as_slice());
    Ok(ct)
}

/// Inverse DCT reconstruction before the rescale step.
pub fn reconstruct_unscaled(ct: &CompressedTensor) -> Result<Matrix<f32>> {
    ct.validate()?;
    let p = ct.patch_size;
    let p2 = p * p;
    let basis = DctBasis::cached(p)?;
    let offsets = ct.patch_offsets();

    let patches: Vec<Matrix<f64>> = (0..ct.patch_count())
        .into_par_iter()
        .map(|k| {
            let bits = ct.bit_widths[k];
            let (lo, hi) = ct.ranges[k];
            let codes = if bits == 0 {
                Vec::new()
            } else {
                quant::unpack_codes(&ct.blob[offsets[k]..offsets[k + 1]], bits, p2)?
            };
            let block = quant::dequantize_patch(&QuantizedPatch { bits, lo, hi, codes }, p)?;
            if ct.zero_bit_mode.needs_inverse(bits) {
                basis.inverse(&block)
            } else {
                Ok(block)
            }
        })
        .collect::<Result<_>>()?;

    let (gr, gc) = patch::grid_dims(ct.shape, p);
    patch::reassemble(&PatchGrid {
        patch_size: p,
        original_shape: ct.shape,
        padded_shape: (gr * p, gc * p),
        patches,
    })
}

/// Full reconstruction: inverse DCT, reassembly, then `γ` rescaling.
pub fn reconstruct_tensor(ct: &CompressedTensor) -> Result<Matrix<f32>> {
    let mut m = reconstruct_unscaled(ct)?;
    let g = ct.gamma;
    m.as_mut_slice().iter_mut().for_each(|v| *v *= g);
    Ok(m)
}

/// One tensor of an archive, in source checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveRecord {
    Dct(CompressedTensor),
    Sign {
        name: String,
        dtype: DType,
        sign: SignCompressed,
    },
    Svd {
        name: String,
        dtype: DType,
        svd: SvdMixedCompressed,
    },
    Passthrough {
        name: String,
        tensor: Tensor,
    },
}

/// Kind byte written to the container for each record type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Passthrough = 0,
    Dct = 1,
    Sign = 2,
    Svd = 3,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Passthrough => "passthrough",
            RecordKind::Dct => "dct",
            RecordKind::Sign => "sign",
            RecordKind::Svd => "svd",
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(RecordKind::Passthrough),
            1 => Some(RecordKind::Dct),
            2 => Some(RecordKind::Sign),
            3 => Some(RecordKind::Svd),
            _ => None,
        }
    }
}

impl ArchiveRecord {
    pub fn name(&self) -> &str {
        match self {
            ArchiveRecord::Dct(ct) => &ct.name,
            ArchiveRecord::Sign { name, .. }
            | ArchiveRecord::Svd { name, .. }
            | ArchiveRecord::Passthrough { name, .. } => name,
        }
    }

    pub fn kind(&self) -> RecordKind {
        match self {
            ArchiveRecord::Dct(_) => RecordKind::Dct,
            ArchiveRecord::Sign { .. } => RecordKind::Sign,
            ArchiveRecord::Svd { .. } => RecordKind::Svd,
            ArchiveRecord::Passthrough { .. } => RecordKind::Passthrough,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            ArchiveRecord::Dct(ct) => ct.dtype,
            ArchiveRecord::Sign { dtype, .. } | ArchiveRecord::Svd { dtype, .. } => *dtype,
            ArchiveRecord::Passthrough { tensor, .. } => tensor.dtype,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ArchiveRecord::Dct(ct) => vec![ct.shape.0, ct.shape.1],
            ArchiveRecord::Sign { sign, .. } => vec![sign.shape.0, sign.shape.1],
            ArchiveRecord::Svd { svd, .. } => vec![svd.shape.0, svd.shape.1],
            ArchiveRecord::Passthrough { tensor, .. } => tensor.shape.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Reconstructed delta for compressed records; `None` for passthrough.
    pub fn reconstruct_delta(&self) -> Result<Option<Matrix<f32>>> {
        Ok(Some(match self {
            ArchiveRecord::Dct(ct) => reconstruct_tensor(ct)?,
            ArchiveRecord::Sign { sign, .. } => baselines::sign_reconstruct(sign)?,
            ArchiveRecord::Svd { svd, .. } => baselines::svd_mixed_reconstruct(svd)?,
            ArchiveRecord::Passthrough { .. } => return Ok(None),
        }))
    }
}

/// Compressed deltas for one fine-tuned checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaArchive {
    pub version: u16,
    pub config: CompressConfig,
    pub records: Vec<ArchiveRecord>,
}

impl DeltaArchive {
    pub fn get(&self, name: &str) -> Option<&ArchiveRecord> {
        self.records.iter().find(|r| r.name() == name)
    }
}

fn compress_record(name: &str, dtype: DType, delta: &Matrix<f32>, cfg: &CompressConfig) -> Result<ArchiveRecord> {
    let with_name = |e: Error| match e {
        Error::NonFinite(_) => Error::NonFinite(Some(format!("tensor `{name}`"))),
        other => other,
    };
    Ok(match cfg.method {
        Method::Dct => {
            let mut ct = compress_tensor(delta, cfg).map_err(with_name)?;
            ct.name = name.to_string();
            ct.dtype = dtype;
            ArchiveRecord::Dct(ct)
        }
        Method::Sign => ArchiveRecord::Sign {
            name: name.to_string(),
            dtype,
            sign: baselines::sign_compress(delta).map_err(with_name)?,
        },
        Method::Svd => ArchiveRecord::Svd {
            name: name.to_string(),
            dtype,
            svd: baselines::svd_mixed_compress(
                delta,
                &baselines::default_svd_groups(delta.shape()),
                cfg.range_dtype,
            )
            .map_err(with_name)?,
        },
    })
}

/// Compresses `finetuned - base` for every compressible tensor; everything
/// else is stored verbatim. Record order follows the fine-tuned checkpoint.
pub fn compress_checkpoint(
    base: &NamedTensorMap,
    finetuned: &NamedTensorMap,
    cfg: &CompressConfig,
) -> Result<DeltaArchive> {
    cfg.validate()?;
    if finetuned.is_empty() {
        return Err(Error::EmptyCheckpoint);
    }
    let deltas = compute_delta(finetuned, base, &cfg.rule())?;

    let compressed: Vec<ArchiveRecord> = deltas
        .compressible
        .par_iter()
        .map(|d| compress_record(&d.name, d.dtype, &d.delta, cfg))
        .collect::<Result<_>>()?;

    let mut compressed = compressed.into_iter().peekable();
    let mut passthrough = deltas.passthrough.into_iter().peekable();
    let mut records = Vec::with_capacity(finetuned.len());
    for name in finetuned.names() {
        if compressed.peek().is_some_and(|r| r.name() == name) {
            records.push(compressed.next().unwrap());
        } else {
            let (pname, tensor) = passthrough.next().expect("delta partition is complete");
            debug_assert_eq!(pname, name);
            records.push(ArchiveRecord::Passthrough { name: pname, tensor });
        }
    }
    Ok(DeltaArchive {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        records,
    })
}

/// Rebuilds the fine-tuned checkpoint from `base` and an archive.
pub fn apply_archive(base: &NamedTensorMap, archive: &DeltaArchive) -> Result<NamedTensorMap> {
    if archive.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(archive.version));
    }
    let tensors: Vec<Tensor> = archive
        .records
        .par_iter()
        .map(|rec| {
            let name = rec.name();
            let Some(delta) = rec.reconstruct_delta()? else {
                let ArchiveRecord::Passthrough { tensor, .. } = rec else { unreachable!() };
                return Ok(tensor.clone());
            };
            let b = base.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            let shape = rec.shape();
            if b.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: shape,
                    right: b.shape.clone(),
                });
            }
            if b.dtype != rec.dtype() {
                return Err(Error::DtypeMismatch {
                    name: name.to_string(),
                    left: rec.dtype().as_str(),
                    right: b.dtype.as_str(),
                });
            }
            // Zero deltas keep the base value bit-for-bit (including -0.0).
            let data: Vec<f32> = b
                .data
                .iter()
                .zip(delta.as_slice())
                .map(|(&x, &d)| if d == 0.0 { x } else { x + d })
                .collect();
            // Round to the stored dtype so in-memory results match what gets saved.
            let data = match b.dtype {
                DType::F32 => data,
                dt => dt.decode(&dt.encode(&data)),
            };
            Tensor::new(b.dtype, shape, data)
        })
        .collect::<Result<_>>()?;

    let mut out = NamedTensorMap::new();
    for (rec, t) in archive.records.iter().zip(tensors) {
        out.insert(rec.name(), t)?;
    }
    Ok(out)
}

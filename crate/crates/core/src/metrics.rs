//! Reconstruction fidelity, value histograms and storage accounting.

use std::io::{self, Write};

use crate::baselines::{default_svd_groups, SvdMixedCompressed};
use crate::checkpoint::{DType, NamedTensorMap};
use crate::codec::format::{self, RecordLayout};
use crate::codec::{ArchiveRecord, CompressConfig, DeltaArchive, Method, RecordKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::patch::patch_count;
use crate::quant::packed_len;

/// Error statistics of a reconstruction against its original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityReport {
    pub numel: usize,
    /// `‖X − Y‖_F / ‖X‖_F`; 0 when both are zero, 1 when only `X` is.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Cosine of the flattened tensors; 1 when both are zero, 0 when one is.
    pub cosine: f64,
}

/// Running sums behind a [`FidelityReport`], so tensors can be pooled.
#[derive(Debug, Clone, Copy, Default)]
pub struct FidelityAccumulator {
    numel: usize,
    diff_sq: f64,
    orig_sq: f64,
    recon_sq: f64,
    dot: f64,
    abs_sum: f64,
    max_abs: f64,
}

impl FidelityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, original: &[f32], reconstructed: &[f32]) -> Result<()> {
        if original.len() != reconstructed.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vs {} elements",
                original.len(),
                reconstructed.len()
            )));
        }
        for (&a, &b) in original.iter().zip(reconstructed) {
            let (a, b) = (f64::from(a), f64::from(b));
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite(Some("fidelity input".into())));
            }
            let d = (a - b).abs();
            self.diff_sq += d * d;
            self.orig_sq += a * a;
            self.recon_sq += b * b;
            self.dot += a * b;
            self.abs_sum += d;
            self.max_abs = self.max_abs.max(d);
        }
        self.numel += original.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &FidelityAccumulator) {
        self.numel += other.numel;
        self.diff_sq += other.diff_sq;
        self.orig_sq += other.orig_sq;
        self.recon_sq += other.recon_sq;
        self.dot += other.dot;
        self.abs_sum += other.abs_sum;
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn finish(&self) -> FidelityReport {
        let rel_error = if self.orig_sq > 0.0 {
            (self.diff_sq / self.orig_sq).sqrt()
        } else if self.diff_sq > 0.0 {
            1.0
        } else {
            0.0
        };
        let cosine = match (self.orig_sq > 0.0, self.recon_sq > 0.0) {
            (true, true) => (self.dot / (self.orig_sq.sqrt() * self.recon_sq.sqrt())).clamp(-1.0, 1.0),
            (false, false) => 1.0,
            _ => 0.0,
        };
        FidelityReport {
            numel: self.numel,
            rel_error,
            max_abs_error: self.max_abs,
            mean_abs_error: if self.numel == 0 { 0.0 } else { self.abs_sum / self.numel as f64 },
            cosine,
        }
    }
}

pub fn fidelity(original: &Matrix<f32>, reconstructed: &Matrix<f32>) -> Result<FidelityReport> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::DimensionMismatch(format!(
            "shape {:?} vs {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    let mut acc = FidelityAccumulator::new();
    acc.add(original.as_slice(), reconstructed.as_slice())?;
    Ok(acc.finish())
}

/// Per-tensor and pooled fidelity of two checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFidelity {
    pub tensors: Vec<(String, FidelityReport)>,
    pub total: FidelityReport,
}

/// Compares every tensor of `a` with the same-named tensor of `b`.
pub fn compare_checkpoints(a: &NamedTensorMap, b: &NamedTensorMap) -> Result<CheckpointFidelity> {
    if a.len() != b.len() {
        if let Some(n) = b.names().find(|n| a.get(n).is_none()) {
            return Err(Error::MissingTensor(n.to_string()));
        }
    }
    let mut total = FidelityAccumulator::new();
    let mut tensors = Vec::with_capacity(a.len());
    for (name, ta) in a.iter() {
        let tb = b.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut acc = FidelityAccumulator::new();
        acc.add(&ta.data, &tb.data).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(Some(format!("tensor `{name}`"))),
            other => other,
        })?;
        total.merge(&acc);
        tensors.push((name.to_string(), acc.finish()));
    }
    Ok(CheckpointFidelity {
        tensors,
        total: total.finish(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
}

/// Uniform-bin histogram over `[min, max]` of the values, or over `range`.
///
/// The top edge belongs to the last bin. Values outside an explicit range are
/// counted in the nearest edge bin, so counts always sum to the input length.
pub fn histogram(values: &[f32], bins: usize, range: Option<(f64, f64)>) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(Some("histogram input".into())));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidConfig(format!("invalid histogram range ({lo}, {hi})")));
            }
            (lo, hi)
        }
        None => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        }),
    };
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = if width > 0.0 {
            let t = ((f64::from(v) - lo) / width).floor();
            if t < 0.0 {
                0
            } else {
                (t as usize).min(bins - 1)
            }
        } else {
            0
        };
        out[idx].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv(bins: &[HistogramBin], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "bin_left,bin_right,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.left, b.right, b.count)?;
    }
    Ok(())
}

/// Storage of one archive record, in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageEntry {
    pub name: String,
    pub kind: RecordKind,
    pub dtype: DType,
    pub numel: usize,
    /// Packed codes, sign bits, or raw values for passthrough tensors.
    pub payload_bits: u64,
    /// Quantization ranges.
    pub range_bits: u64,
    /// The per-tensor scale (`γ` for dct, `α` for sign; stored as 1 otherwise).
    pub scale_bits: u64,
    /// Name, shape, kind, locators, bit-width tables and group tables.
    pub metadata_bits: u64,
}

impl StorageEntry {
    /// Payload and range bits per parameter, the headline figure.
    pub fn bits_per_param(&self) -> f64 {
        (self.payload_bits + self.range_bits) as f64 / self.numel as f64
    }

    /// Headline bits plus the per-tensor scale, per parameter.
    pub fn bits_per_param_with_scale(&self) -> f64 {
        (self.payload_bits + self.range_bits + self.scale_bits) as f64 / self.numel as f64
    }

    /// Equivalent ratio against the source dtype (16 bits for half-class
    /// dtypes, 32 for float32).
    pub fn alpha(&self) -> f64 {
        self.bits_per_param() / if self.dtype.is_half_class() { 16.0 } else { 32.0 }
    }

    pub fn alpha_vs_16(&self) -> f64 {
        self.bits_per_param() / 16.0
    }

    pub fn alpha_vs_32(&self) -> f64 {
        self.bits_per_param() / 32.0
    }

    pub fn total_bits(&self) -> u64 {
        self.payload_bits + self.range_bits + self.scale_bits + self.metadata_bits
    }
}

/// Storage of a whole archive.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub entries: Vec<StorageEntry>,
    /// Preamble and config header.
    pub file_overhead_bits: u64,
}

impl StorageReport {
    fn compressed(&self) -> impl Iterator<Item = &StorageEntry> {
        self.entries.iter().filter(|e| e.kind != RecordKind::Passthrough)
    }

    pub fn compressed_params(&self) -> usize {
        self.compressed().map(|e| e.numel).sum()
    }

    pub fn payload_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.payload_bits).sum()
    }

    pub fn range_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.range_bits).sum()
    }

    pub fn scale_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.scale_bits).sum()
    }

    pub fn metadata_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.metadata_bits).sum()
    }

    /// Headline bits per parameter over compressed tensors only.
    pub fn compressed_bits_per_param(&self) -> f64 {
        let bits: u64 = self.compressed().map(|e| e.payload_bits + e.range_bits).sum();
        bits as f64 / self.compressed_params() as f64
    }

    /// Equivalent ratio over compressed tensors against their source dtypes.
    pub fn compressed_alpha(&self) -> f64 {
        let source_bits: f64 = self
            .compressed()
            .map(|e| e.numel as f64 * if e.dtype.is_half_class() { 16.0 } else { 32.0 })
            .sum();
        let bits: u64 = self.compressed().map(|e| e.payload_bits + e.range_bits).sum();
        bits as f64 / source_bits
    }

    pub fn total_bits(&self) -> u64 {
        self.file_overhead_bits + self.entries.iter().map(StorageEntry::total_bits).sum::<u64>()
    }

    /// Exact file size in bytes.
    pub fn total_bytes(&self) -> u64 {
        self.total_bits() / 8
    }
}

fn bits(bytes: usize) -> u64 {
    bytes as u64 * 8
}

fn svd_range_bytes(svd: &SvdMixedCompressed) -> usize {
    let vectors: usize = svd.groups.iter().map(|g| g.vectors.len()).sum();
    4 * vectors * svd.range_dtype.bytes()
}

fn entry_from_layout(rec: &ArchiveRecord, layout: RecordLayout) -> StorageEntry {
    let (payload, range, extra_meta) = match rec {
        ArchiveRecord::Svd { svd, .. } => {
            let ranges = svd_range_bytes(svd);
            let table = 4 + 9 * svd.groups.len();
            (layout.blob_bytes - ranges - table, ranges, table)
        }
        _ => (layout.blob_bytes, layout.range_bytes, 0),
    };
    StorageEntry {
        name: rec.name().to_string(),
        kind: rec.kind(),
        dtype: rec.dtype(),
        numel: rec.numel(),
        payload_bits: bits(payload),
        range_bits: bits(range),
        scale_bits: bits(layout.scale_bytes),
        metadata_bits: bits(layout.metadata_bytes + extra_meta),
    }
}

/// Measured storage of every record in an archive; totals match the encoded
/// file size to the byte.
pub fn storage_report(archive: &DeltaArchive) -> StorageReport {
    let rd = archive.config.range_dtype;
    StorageReport {
        entries: archive
            .records
            .iter()
            .map(|r| entry_from_layout(r, format::record_layout(r, rd)))
            .collect(),
        file_overhead_bits: bits(format::PREAMBLE_BYTES + format::config_header_bytes(&archive.config)),
    }
}

/// Predicted storage of a `rows x cols` tensor named `name` under `cfg`,
/// without compressing anything.
pub fn storage_accounting(cfg: &CompressConfig, name: &str, shape: (usize, usize), dtype: DType) -> Result<StorageEntry> {
    cfg.validate()?;
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput);
    }
    let numel = rows * cols;
    // Name, kind, dtype, rank-2 shape, patch size, mode, M, blob locator.
    let base_meta = 4 + name.len() + 2 + 1 + 16 + 4 + 1 + 8 + 16;
    let rb = cfg.range_dtype.bytes();
    let (kind, payload, range, meta) = match cfg.method {
        Method::Dct => {
            let p = cfg.patch_size;
            let m = patch_count(shape, p);
            let counts = cfg.bit_plan.level_counts(m);
            let payload: usize = cfg
                .bit_plan
                .levels
                .iter()
                .zip(&counts)
                .map(|(l, &c)| c * packed_len(l.bits, p * p))
                .sum();
            (RecordKind::Dct, payload, 2 * m * rb, base_meta + m)
        }
        Method::Sign => (RecordKind::Sign, packed_len(1, numel), 0, base_meta),
        Method::Svd => {
            let groups = default_svd_groups(shape);
            let mut payload = 0;
            let mut vectors = 0;
            for g in &groups {
                let n = g.end - g.begin;
                vectors += n;
                payload += n * (packed_len(g.bits, rows) + packed_len(g.bits, cols));
            }
            (RecordKind::Svd, payload, 4 * vectors * rb, base_meta + 4 + 9 * groups.len())
        }
    };
    Ok(StorageEntry {
        name: name.to_string(),
        kind,
        dtype,
        numel,
        payload_bits: bits(payload),
        range_bits: bits(range),
        scale_bits: 32,
        metadata_bits: bits(meta),
    })
}

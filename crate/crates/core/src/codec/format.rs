//! The `DDC1` container.
//!
//! ```text
//! magic "DDC1" | version u16 | flags u16 | header_len u64 | header | payload
//! ```
//!
//! All integers are little-endian. Flag bit 0 selects float16 range storage
//! (float32 otherwise); other flag bits must be zero.
//!
//! The header starts with an echo of the compression config:
//!
//! ```text
//! method u8 | patch_size u32 | zero_bit_mode u8
//! level_count u8 | (bits u8, ratio f64) * level_count
//! pattern_count u32 | (len u32, utf8 bytes) * pattern_count
//! record_count u64
//! ```
//!
//! followed by one record per tensor, in checkpoint order:
//!
//! ```text
//! name_len u32 | name | kind u8 | dtype u8 | rank u8 | dims u64 * rank
//! patch_size u32 | zero_bit_mode u8 | M u64 | bit_widths u8 * M
//! ranges (lo, hi) * M in the range dtype | scale f32
//! blob_offset u64 | blob_len u64
//! ```
//!
//! Kinds: 0 passthrough (blob is the raw tensor in its dtype), 1 dct (blob is
//! the per-patch packed codes, each patch byte-aligned), 2 sign (blob is the
//! sign bitmap, scale holds α), 3 svd (blob holds groups, vector ranges and
//! codes). Non-dct kinds write `patch_size = 0`, `M = 0`, and scale 1 unless
//! noted. Blob offsets are relative to the payload start and blobs are stored
//! back to back in record order.

use std::fs;
use std::path::Path;

use crate::baselines::{SignCompressed, SvdMixedCompressed};
use crate::checkpoint::{DType, Tensor};
use crate::error::{Error, Result};
use crate::patch::{BitLevel, BitPlan};
use crate::quant::{self, RangeDtype, ZeroBitMode};
use crate::reader::ByteReader;

use super::{ArchiveRecord, CompressConfig, CompressedTensor, DeltaArchive, Method, RecordKind};

pub const MAGIC: &[u8; 4] = b"DDC1";
pub const FORMAT_VERSION: u16 = 1;
/// Magic, version, flags and header length.
pub const PREAMBLE_BYTES: usize = 4 + 2 + 2 + 8;

const FLAG_F16_RANGES: u16 = 1;

/// Byte sizes of one record's pieces in the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordLayout {
    /// Header bytes other than ranges and scale: name, kind, dtype, shape,
    /// patch size, mode, patch count, bit-width table and blob locator.
    pub metadata_bytes: usize,
    /// Per-patch range bounds in the header.
    pub range_bytes: usize,
    /// The per-tensor scale (`γ` or `α`).
    pub scale_bytes: usize,
    /// Payload blob length.
    pub blob_bytes: usize,
}

impl RecordLayout {
    pub fn total(&self) -> usize {
        self.metadata_bytes + self.range_bytes + self.scale_bytes + self.blob_bytes
    }
}

// Patch size, zero-bit mode byte, widths, ranges, scale.
type RecordFields<'a> = (usize, u8, &'a [u8], &'a [(f64, f64)], f32);

fn record_fields(rec: &ArchiveRecord) -> RecordFields<'_> {
    match rec {
        ArchiveRecord::Dct(ct) => (
            ct.patch_size,
            ct.zero_bit_mode.to_byte(),
            &ct.bit_widths,
            &ct.ranges,
            ct.gamma,
        ),
        ArchiveRecord::Sign { sign, .. } => (0, 0, &[], &[], sign.alpha),
        ArchiveRecord::Svd { .. } | ArchiveRecord::Passthrough { .. } => (0, 0, &[], &[], 1.0),
    }
}

fn record_blob(rec: &ArchiveRecord) -> Result<Vec<u8>> {
    Ok(match rec {
        ArchiveRecord::Dct(ct) => ct.blob.clone(),
        ArchiveRecord::Sign { sign, .. } => sign.bitmap.clone(),
        ArchiveRecord::Svd { svd, .. } => svd.encode_blob()?,
        ArchiveRecord::Passthrough { tensor, .. } => tensor.to_bytes(),
    })
}

fn blob_len(rec: &ArchiveRecord) -> usize {
    match rec {
        ArchiveRecord::Dct(ct) => ct.blob.len(),
        ArchiveRecord::Sign { sign, .. } => sign.bitmap.len(),
        ArchiveRecord::Svd { svd, .. } => svd_blob_len(svd),
        ArchiveRecord::Passthrough { tensor, .. } => tensor.numel() * tensor.dtype.size_in_bytes(),
    }
}

pub(crate) fn svd_blob_len(svd: &SvdMixedCompressed) -> usize {
    let (rows, cols) = svd.shape;
    let per_vector = |bits: u8| {
        4 * svd.range_dtype.bytes() + quant::packed_len(bits, rows) + quant::packed_len(bits, cols)
    };
    4 + svd.groups.len() * 9
        + svd
            .groups
            .iter()
            .map(|g| g.vectors.len() * per_vector(g.spec.bits))
            .sum::<usize>()
}

/// Container byte sizes of one record.
pub fn record_layout(rec: &ArchiveRecord, range_dtype: RangeDtype) -> RecordLayout {
    let (_, _, widths, ranges, _) = record_fields(rec);
    let rank = rec.shape().len();
    let metadata_bytes = 4 + rec.name().len() // name
        + 1 + 1 // kind, dtype
        + 1 + 8 * rank // shape
        + 4 + 1 // patch size, zero-bit mode
        + 8 + widths.len() // M and widths
        + 16; // blob locator
    RecordLayout {
        metadata_bytes,
        range_bytes: 2 * ranges.len() * range_dtype.bytes(),
        scale_bytes: 4,
        blob_bytes: blob_len(rec),
    }
}

/// Bytes of the config echo plus the record count.
pub fn config_header_bytes(cfg: &CompressConfig) -> usize {
    1 + 4 + 1
        + 1 + 9 * cfg.bit_plan.levels.len()
        + 4 + cfg.passthrough_patterns.iter().map(|p| 4 + p.len()).sum::<usize>()
        + 8
}

/// Exact encoded size of an archive.
pub fn encoded_len(archive: &DeltaArchive) -> usize {
    PREAMBLE_BYTES
        + config_header_bytes(&archive.config)
        + archive
            .records
            .iter()
            .map(|r| record_layout(r, archive.config.range_dtype).total())
            .sum::<usize>()
}

fn check_range_dtype(archive: &DeltaArchive) -> Result<()> {
    let want = archive.config.range_dtype;
    for rec in &archive.records {
        let got = match rec {
            ArchiveRecord::Dct(ct) => ct.range_dtype,
            ArchiveRecord::Svd { svd, .. } => svd.range_dtype,
            _ => continue,
        };
        if got != want {
            return Err(Error::InvalidTensor {
                name: rec.name().to_string(),
                reason: format!(
                    "range dtype {} differs from archive range dtype {}",
                    got.as_str(),
                    want.as_str()
                ),
            });
        }
    }
    Ok(())
}

/// Serializes an archive to bytes.
pub fn encode_archive(archive: &DeltaArchive) -> Result<Vec<u8>> {
    if archive.records.is_empty() {
        return Err(Error::EmptyArchive);
    }
    if archive.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(archive.version));
    }
    check_range_dtype(archive)?;
    let cfg = &archive.config;
    let range_dtype = cfg.range_dtype;

    let mut header = Vec::new();
    header.push(cfg.method.to_byte());
    header.extend((cfg.patch_size as u32).to_le_bytes());
    header.push(cfg.zero_bit_mode.to_byte());
    let levels = u8::try_from(cfg.bit_plan.levels.len())
        .map_err(|_| Error::InvalidBitPlan("more than 255 levels".into()))?;
    header.push(levels);
    for l in &cfg.bit_plan.levels {
        header.push(l.bits);
        header.extend(l.ratio.to_le_bytes());
    }
    header.extend((cfg.passthrough_patterns.len() as u32).to_le_bytes());
    for p in &cfg.passthrough_patterns {
        header.extend((p.len() as u32).to_le_bytes());
        header.extend(p.as_bytes());
    }
    header.extend((archive.records.len() as u64).to_le_bytes());

    let mut payload = Vec::new();
    for rec in &archive.records {
        if let ArchiveRecord::Dct(ct) = rec {
            ct.validate()?;
        }
        let name = rec.name();
        let shape = rec.shape();
        let (patch_size, mode, widths, ranges, scale) = record_fields(rec);
        header.extend((name.len() as u32).to_le_bytes());
        header.extend(name.as_bytes());
        header.push(rec.kind() as u8);
        header.push(rec.dtype().to_byte());
        header.push(shape.len() as u8);
        for d in &shape {
            header.extend((*d as u64).to_le_bytes());
        }
        header.extend((patch_size as u32).to_le_bytes());
        header.push(mode);
        header.extend((widths.len() as u64).to_le_bytes());
        header.extend(widths);
        for &(lo, hi) in ranges {
            range_dtype.encode(lo, &mut header);
            range_dtype.encode(hi, &mut header);
        }
        header.extend(scale.to_le_bytes());
        let blob = record_blob(rec)?;
        header.extend((payload.len() as u64).to_le_bytes());
        header.extend((blob.len() as u64).to_le_bytes());
        payload.extend(blob);
    }

    let flags = match range_dtype {
        RangeDtype::F32 => 0,
        RangeDtype::F16 => FLAG_F16_RANGES,
    };
    let mut out = Vec::with_capacity(PREAMBLE_BYTES + header.len() + payload.len());
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend(flags.to_le_bytes());
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(payload);
    Ok(out)
}

struct RawRecord {
    name: String,
    kind: RecordKind,
    dtype: DType,
    shape: Vec<usize>,
    patch_size: usize,
    zero_bit_mode: ZeroBitMode,
    widths: Vec<u8>,
    ranges: Vec<(f64, f64)>,
    scale: f32,
    blob_offset: u64,
    blob_len: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptArchive(msg.into())
}

fn truncated_header() -> Error {
    corrupt("header ends early (header/payload length inconsistency)")
}

fn read_config(rd: &mut ByteReader<'_>, range_dtype: RangeDtype) -> Result<CompressConfig> {
    let method = rd.u8().ok_or_else(truncated_header)?;
    let method = Method::from_byte(method).ok_or_else(|| corrupt(format!("unknown method {method}")))?;
    let patch_size = rd.u32().ok_or_else(truncated_header)? as usize;
    let mode = rd.u8().ok_or_else(truncated_header)?;
    let zero_bit_mode =
        ZeroBitMode::from_byte(mode).ok_or_else(|| corrupt(format!("unknown zero-bit mode {mode}")))?;
    let n_levels = rd.u8().ok_or_else(truncated_header)?;
    let mut levels = Vec::with_capacity(usize::from(n_levels));
    for _ in 0..n_levels {
        let bits = rd.u8().ok_or_else(truncated_header)?;
        let ratio = rd.f64().ok_or_else(truncated_header)?;
        levels.push(BitLevel { bits, ratio });
    }
    let bit_plan = BitPlan::new(levels)?;
    let n_patterns = rd.u32().ok_or_else(truncated_header)?;
    let mut passthrough_patterns = Vec::new();
    for _ in 0..n_patterns {
        let len = rd.u32().ok_or_else(truncated_header)? as usize;
        let bytes = rd.take(len).ok_or_else(truncated_header)?;
        let s = std::str::from_utf8(bytes).map_err(|_| corrupt("pattern is not UTF-8"))?;
        passthrough_patterns.push(s.to_string());
    }
    let cfg = CompressConfig {
        patch_size,
        bit_plan,
        range_dtype,
        zero_bit_mode,
        passthrough_patterns,
        method,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_record(rd: &mut ByteReader<'_>, range_dtype: RangeDtype) -> Result<RawRecord> {
    let name_len = rd.u32().ok_or_else(truncated_header)? as usize;
    let name = rd.take(name_len).ok_or_else(truncated_header)?;
    let name = std::str::from_utf8(name)
        .map_err(|_| corrupt("tensor name is not UTF-8"))?
        .to_string();
    let bad = |msg: String| Error::CorruptArchive(format!("tensor `{name}`: {msg}"));
    let kind = rd.u8().ok_or_else(truncated_header)?;
    let kind = RecordKind::from_byte(kind).ok_or_else(|| bad(format!("unknown kind {kind}")))?;
    let dtype = rd.u8().ok_or_else(truncated_header)?;
    let dtype = DType::from_byte(dtype).ok_or_else(|| bad(format!("unknown dtype {dtype}")))?;
    let rank = rd.u8().ok_or_else(truncated_header)?;
    let mut shape = Vec::with_capacity(usize::from(rank));
    for _ in 0..rank {
        let d = rd.u64().ok_or_else(truncated_header)?;
        if d == 0 || d > usize::MAX as u64 {
            return Err(bad(format!("invalid dimension {d}")));
        }
        shape.push(d as usize);
    }
    if shape.iter().try_fold(8usize, |acc, &d| acc.checked_mul(d)).is_none() {
        return Err(bad(format!("shape {shape:?} is too large")));
    }
    let patch_size = rd.u32().ok_or_else(truncated_header)? as usize;
    let mode = rd.u8().ok_or_else(truncated_header)?;
    let zero_bit_mode = ZeroBitMode::from_byte(mode).ok_or_else(|| bad(format!("unknown zero-bit mode {mode}")))?;
    let m = rd.u64().ok_or_else(truncated_header)?;
    if m > rd.remaining() as u64 {
        return Err(truncated_header());
    }
    let m = m as usize;
    let widths = rd.take(m).ok_or_else(truncated_header)?.to_vec();
    let rb = range_dtype.bytes();
    let raw_ranges = rd.take(2 * m * rb).ok_or_else(truncated_header)?;
    let ranges = raw_ranges
        .chunks_exact(2 * rb)
        .map(|c| (range_dtype.decode(&c[..rb]), range_dtype.decode(&c[rb..])))
        .collect();
    let scale = rd.f32().ok_or_else(truncated_header)?;
    let blob_offset = rd.u64().ok_or_else(truncated_header)?;
    let blob_len = rd.u64().ok_or_else(truncated_header)?;
    Ok(RawRecord {
        name,
        kind,
        dtype,
        shape,
        patch_size,
        zero_bit_mode,
        widths,
        ranges,
        scale,
        blob_offset,
        blob_len,
    })
}

fn matrix_shape(raw: &RawRecord) -> Result<(usize, usize)> {
    match raw.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(corrupt(format!(
            "tensor `{}`: compressed record needs a 2-D shape, got {:?}",
            raw.name, raw.shape
        ))),
    }
}

fn build_record(raw: RawRecord, blob: &[u8], range_dtype: RangeDtype) -> Result<ArchiveRecord> {
    let rname = raw.name.clone();
    let in_tensor = |e: Error| match e {
        Error::CorruptArchive(msg) => corrupt(format!("tensor `{rname}`: {msg}")),
        Error::InvalidTensor { name, reason } => corrupt(format!("tensor `{name}`: {reason}")),
        Error::InvalidGroups(msg) | Error::DimensionMismatch(msg) => corrupt(format!("tensor `{rname}`: {msg}")),
        Error::PackedTooShort { .. } | Error::BitWidthTooLarge(_) => corrupt(format!("tensor `{rname}`: {e}")),
        other => other,
    };
    Ok(match raw.kind {
        RecordKind::Dct => {
            let ct = CompressedTensor {
                shape: matrix_shape(&raw)?,
                name: raw.name,
                dtype: raw.dtype,
                patch_size: raw.patch_size,
                zero_bit_mode: raw.zero_bit_mode,
                range_dtype,
                bit_widths: raw.widths,
                ranges: raw.ranges,
                blob: blob.to_vec(),
                gamma: raw.scale,
            };
            ct.validate().map_err(in_tensor)?;
            ArchiveRecord::Dct(ct)
        }
        RecordKind::Sign => {
            let shape = matrix_shape(&raw)?;
            let need = quant::packed_len(1, shape.0 * shape.1);
            if blob.len() != need || !raw.scale.is_finite() || raw.scale < 0.0 {
                return Err(corrupt(format!("tensor `{}`: malformed sign record", raw.name)));
            }
            ArchiveRecord::Sign {
                name: raw.name,
                dtype: raw.dtype,
                sign: SignCompressed {
                    shape,
                    bitmap: blob.to_vec(),
                    alpha: raw.scale,
                },
            }
        }
        RecordKind::Svd => {
            let shape = matrix_shape(&raw)?;
            let svd = SvdMixedCompressed::decode_blob(blob, shape, range_dtype).map_err(in_tensor)?;
            ArchiveRecord::Svd {
                name: raw.name,
                dtype: raw.dtype,
                svd,
            }
        }
        RecordKind::Passthrough => {
            let numel: usize = raw.shape.iter().product();
            if blob.len() != numel * raw.dtype.size_in_bytes() {
                return Err(corrupt(format!(
                    "tensor `{}`: raw blob of {} bytes does not match shape {:?}",
                    raw.name,
                    blob.len(),
                    raw.shape
                )));
            }
            let tensor = Tensor::new(raw.dtype, raw.shape, raw.dtype.decode(blob))?;
            ArchiveRecord::Passthrough { name: raw.name, tensor }
        }
    })
}

/// Parses an archive from bytes.
pub fn decode_archive(bytes: &[u8]) -> Result<DeltaArchive> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut rd = ByteReader::new(bytes);
    rd.take(4);
    let version = rd.u16().ok_or_else(|| corrupt("file ends inside preamble"))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = rd.u16().ok_or_else(|| corrupt("file ends inside preamble"))?;
    if flags & !FLAG_F16_RANGES != 0 {
        return Err(corrupt(format!("unknown flags {flags:#06x}")));
    }
    let range_dtype = if flags & FLAG_F16_RANGES != 0 {
        RangeDtype::F16
    } else {
        RangeDtype::F32
    };
    let header_len = rd.u64().ok_or_else(|| corrupt("file ends inside preamble"))?;
    if header_len > rd.remaining() as u64 {
        return Err(corrupt(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rd.remaining()
        )));
    }
    let header = rd.take(header_len as usize).unwrap();
    let payload = &bytes[rd.position()..];

    let mut hr = ByteReader::new(header);
    let config = read_config(&mut hr, range_dtype)?;
    let count = hr.u64().ok_or_else(truncated_header)?;
    let mut raws = Vec::new();
    for _ in 0..count {
        raws.push(read_record(&mut hr, range_dtype)?);
    }
    if hr.remaining() != 0 {
        return Err(corrupt(format!(
            "{} unparsed header bytes (header/payload length inconsistency)",
            hr.remaining()
        )));
    }
    if raws.is_empty() {
        return Err(Error::EmptyArchive);
    }

    let mut expected_offset = 0u64;
    let mut records = Vec::with_capacity(raws.len());
    for raw in raws {
        if raw.blob_offset != expected_offset {
            return Err(corrupt(format!(
                "tensor `{}`: blob offset {} but previous blob ends at {expected_offset}",
                raw.name, raw.blob_offset
            )));
        }
        let end = raw
            .blob_offset
            .checked_add(raw.blob_len)
            .ok_or_else(|| corrupt("blob extent overflows"))?;
        if end > payload.len() as u64 {
            return Err(Error::ArchiveTruncated(raw.name));
        }
        let blob = &payload[raw.blob_offset as usize..end as usize];
        expected_offset = end;
        records.push(build_record(raw, blob, range_dtype)?);
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing payload bytes (header/payload length inconsistency)",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok(DeltaArchive {
        version,
        config,
        records,
    })
}

pub fn write_archive(archive: &DeltaArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_archive(archive)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<DeltaArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

//! Safetensors checkpoint I/O and delta extraction.
//!
//! A safetensors file is an 8-byte little-endian header length, a UTF-8 JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}`, and the raw
//! little-endian payload. Offsets in the header are relative to the start of
//! the payload.
//!
//! All values are held as `f32` in memory. Half-precision payloads are widened
//! on load and narrowed back (round-to-nearest-even) on save, so a load/save
//! cycle reproduces the payload bytes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Storage dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Name used in safetensors headers.
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn from_safetensors(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    /// Whether the equivalent-ratio denominator is 16 (half-precision class)
    /// rather than 32.
    pub fn is_half_class(self) -> bool {
        matches!(self, DType::F16 | DType::BF16)
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::BF16 => 2,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::BF16),
            _ => None,
        }
    }

    /// Decodes little-endian payload bytes into widened `f32` values.
    pub fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// Narrows `f32` values to this dtype (round-to-nearest-even) and encodes
    /// them little-endian.
    pub fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size_in_bytes());
        match self {
            DType::F32 => values.iter().for_each(|v| out.extend(v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|v| out.extend(half::f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| out.extend(half::bf16::from_f32(*v).to_le_bytes())),
        }
        out
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense tensor in float32 working precision that remembers its storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Option<Matrix<f32>> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()).ok(),
            _ => None,
        }
    }

    /// Payload bytes in the stored dtype.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.dtype.encode(&self.data)
    }
}

/// Ordered map from tensor name to tensor: a checkpoint in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    entries: IndexMap<String, Tensor>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; fails if the name is empty or already present.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "empty tensor name".into(),
            });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::NameCollision(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<HeaderEntry>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let root: Map<String, Value> = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::MalformedHeader(format!("invalid JSON: {e}")))?;

    let mut entries = Vec::with_capacity(root.len());
    for (name, info) in root {
        if name == "__metadata__" {
            continue;
        }
        let bad = |reason: &str| Error::InvalidTensor {
            name: name.clone(),
            reason: reason.to_string(),
        };
        let obj = info.as_object().ok_or_else(|| bad("header entry is not an object"))?;
        let offsets: Vec<u64> = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).collect())
            .filter(|v: &Vec<u64>| v.len() == 2)
            .ok_or_else(|| bad("missing or invalid data_offsets"))?;
        let dtype_str = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing dtype"))?;
        let dtype = DType::from_safetensors(dtype_str).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: dtype_str.to_string(),
            offset: offsets[0],
        })?;
        let shape_vals = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape"))?;
        let mut shape = Vec::with_capacity(shape_vals.len());
        for v in shape_vals {
            match v.as_u64() {
                Some(d) if d > 0 => shape.push(d as usize),
                _ => return Err(bad("shape dimensions must be positive integers")),
            }
        }
        let (begin, end) = (offsets[0], offsets[1]);
        if end < begin {
            return Err(bad("data_offsets end before begin"));
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if numel * dtype.size_in_bytes() as u64 != end - begin {
            return Err(Error::InvalidTensor {
                name,
                reason: format!(
                    "data extent {begin}..{end} does not match shape {shape:?} in {dtype}"
                ),
            });
        }
        entries.push(HeaderEntry {
            name,
            dtype,
            shape,
            begin: begin as usize,
            end: end as usize,
        });
    }
    Ok((entries, header_end))
}

/// Loads a safetensors file, preserving header order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Parses an in-memory safetensors container.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<NamedTensorMap> {
    let (entries, header_end) = parse_header(bytes)?;
    let payload = &bytes[header_end..];
    if let Some(e) = entries.iter().find(|e| e.end > payload.len()) {
        return Err(Error::TruncatedPayload {
            name: e.name.clone(),
            begin: e.begin as u64,
            end: e.end as u64,
            available: payload.len() as u64,
        });
    }

    let tensors: Vec<Tensor> = entries
        .par_iter()
        .map(|e| Tensor {
            dtype: e.dtype,
            shape: e.shape.clone(),
            data: e.dtype.decode(&payload[e.begin..e.end]),
        })
        .collect();

    let mut map = NamedTensorMap::new();
    for (e, t) in entries.into_iter().zip(tensors) {
        map.insert(e.name, t)?;
    }
    Ok(map)
}

/// Serializes a checkpoint into safetensors bytes.
pub fn serialize_checkpoint(map: &NamedTensorMap) -> Result<Vec<u8>> {
    if map.is_empty() {
        return Err(Error::EmptyCheckpoint);
    }
    let tensors: Vec<&Tensor> = map.entries.values().collect();
    let payloads: Vec<Vec<u8>> = tensors.par_iter().map(|t| t.to_bytes()).collect();

    let mut header = Map::new();
    let mut offset = 0usize;
    for ((name, t), p) in map.entries.iter().zip(&payloads) {
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, offset + p.len()],
            }),
        );
        offset += p.len();
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    // Payload starts on an 8-byte boundary; the format pads with spaces.
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend((header_bytes.len() as u64).to_le_bytes());
    out.extend(header_bytes);
    for p in payloads {
        out.extend(p);
    }
    Ok(out)
}

/// Writes a checkpoint as safetensors, narrowing each tensor to its dtype tag.
pub fn save_checkpoint(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_checkpoint(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Which tensors are eligible for delta compression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressibilityRule {
    /// Both dimensions of a 2-D tensor must be at least this large.
    pub min_dim: usize,
    /// Tensors whose name contains any of these substrings stay uncompressed.
    pub passthrough_patterns: Vec<String>,
}

impl CompressibilityRule {
    pub fn new(min_dim: usize, passthrough_patterns: Vec<String>) -> Self {
        Self {
            min_dim,
            passthrough_patterns,
        }
    }

    pub fn is_compressible(&self, name: &str, shape: &[usize]) -> bool {
        match shape {
            [r, c] => {
                (*r).min(*c) >= self.min_dim.max(1)
                    && !self
                        .passthrough_patterns
                        .iter()
                        .any(|p| !p.is_empty() && name.contains(p.as_str()))
            }
            _ => false,
        }
    }
}

/// Default name fragments of embedding-like tensors kept at full precision.
pub const DEFAULT_PASSTHROUGH_PATTERNS: &[&str] = &["embed", "lm_head"];

/// A compressible delta: `finetuned - base` for one 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    pub name: String,
    pub dtype: DType,
    pub delta: Matrix<f32>,
}

/// Per-tensor deltas split into compressible matrices and verbatim tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaSet {
    pub compressible: Vec<DeltaMatrix>,
    pub passthrough: Vec<(String, Tensor)>,
}

impl DeltaSet {
    pub fn len(&self) -> usize {
        self.compressible.len() + self.passthrough.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks that both checkpoints hold the same tensor names, shapes and dtypes.
pub fn check_compatible(finetuned: &NamedTensorMap, base: &NamedTensorMap) -> Result<()> {
    for (name, ft) in finetuned.iter() {
        let b = base
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if b.shape != ft.shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                left: ft.shape.clone(),
                right: b.shape.clone(),
            });
        }
        if b.dtype != ft.dtype {
            return Err(Error::DtypeMismatch {
                name: name.to_string(),
                left: ft.dtype.as_str(),
                right: b.dtype.as_str(),
            });
        }
    }
    if let Some(extra) = base.names().find(|n| finetuned.get(n).is_none()) {
        return Err(Error::MissingTensor(extra.to_string()));
    }
    Ok(())
}

/// Splits the fine-tuned checkpoint into compressible deltas and passthrough
/// tensors. Output lists follow the fine-tuned checkpoint's order.
pub fn compute_delta(
    finetuned: &NamedTensorMap,
    base: &NamedTensorMap,
    rule: &CompressibilityRule,
) -> Result<DeltaSet> {
    check_compatible(finetuned, base)?;

    let items: Vec<(&String, &Tensor)> = finetuned.entries.iter().collect();
    let split: Vec<std::result::Result<DeltaMatrix, (String, Tensor)>> = items
        .par_iter()
        .map(|(name, ft)| {
            if rule.is_compressible(name, &ft.shape) {
                let b = &base.entries[name.as_str()];
                let data = ft.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
                let delta = Matrix::from_vec(ft.shape[0], ft.shape[1], data)
                    .expect("shape checked against base");
                Ok(DeltaMatrix {
                    name: (*name).clone(),
                    dtype: ft.dtype,
                    delta,
                })
            } else {
                Err(((*name).clone(), (*ft).clone()))
            }
        })
        .collect();

    let mut set = DeltaSet::default();
    for item in split {
        match item {
            Ok(d) => set.compressible.push(d),
            Err(p) => set.passthrough.push(p),
        }
    }
    Ok(set)
}

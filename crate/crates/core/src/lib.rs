//! Compression of fine-tuning deltas.
//!
//! The delta `finetuned - base` of every 2-D weight is cut into `p x p`
//! patches, each patch is moved to the DCT domain and quantized at a bit width
//! chosen from its norm, and a single rescale factor per tensor restores the
//! delta's L1 mass on decode. Archives reconstruct the fine-tuned checkpoint
//! from the base checkpoint alone; no calibration data is involved.
//!
//! ```no_run
//! use deltadct::{apply_archive, compress_checkpoint, load_checkpoint, CompressConfig};
//!
//! let base = load_checkpoint("base.safetensors")?;
//! let ft = load_checkpoint("finetuned.safetensors")?;
//! let archive = compress_checkpoint(&base, &ft, &CompressConfig::default())?;
//! let rebuilt = apply_archive(&base, &archive)?;
//! # Ok::<(), deltadct::Error>(())
//! ```

pub mod baselines;
pub mod checkpoint;
pub mod codec;
pub mod dct;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod patch;
pub mod quant;
mod reader;

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, serialize_checkpoint, DType, NamedTensorMap, Tensor,
};
pub use codec::{
    apply_archive, compress_checkpoint, compress_tensor, decode_archive, encode_archive, read_archive,
    reconstruct_tensor, write_archive, ArchiveRecord, CompressConfig, CompressedTensor, DeltaArchive, Method,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use patch::{BitLevel, BitPlan};
pub use quant::{RangeDtype, ZeroBitMode};

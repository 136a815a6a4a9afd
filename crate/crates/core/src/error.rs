use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed safetensors header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: unsupported dtype `{dtype}` (data offset {offset})")]
    UnsupportedDtype {
        name: String,
        dtype: String,
        offset: u64,
    },

    #[error("tensor `{name}`: data extent {begin}..{end} exceeds payload of {available} bytes")]
    TruncatedPayload {
        name: String,
        begin: u64,
        end: u64,
        available: u64,
    },

    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("duplicate tensor name `{0}`")]
    NameCollision(String),

    #[error("checkpoint is empty")]
    EmptyCheckpoint,

    #[error("tensor `{0}` is present in only one checkpoint")]
    MissingTensor(String),

    #[error("tensor `{name}`: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor `{name}`: dtype mismatch {left} vs {right}")]
    DtypeMismatch {
        name: String,
        left: &'static str,
        right: &'static str,
    },

    #[error("invalid patch size {0}")]
    InvalidPatchSize(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid bit plan: {0}")]
    InvalidBitPlan(String),

    #[error("bit width {0} exceeds 32")]
    BitWidthTooLarge(u32),

    #[error("non-finite value encountered{}", context_suffix(.0))]
    NonFinite(Option<String>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u32, bits: u32 },

    #[error("packed stream too short: need {needed} bytes, have {available}")]
    PackedTooShort { needed: usize, available: usize },

    #[error("invalid svd groups: {0}")]
    InvalidGroups(String),

    #[error("svd did not converge")]
    SvdFailure,

    #[error("bad archive magic")]
    BadMagic,

    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("archive truncated in payload of tensor `{0}`")]
    ArchiveTruncated(String),

    #[error("archive has no tensors")]
    EmptyArchive,

    #[error("empty input")]
    EmptyInput,

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
}

fn context_suffix(ctx: &Option<String>) -> String {
    ctx.as_ref().map(|c| format!(" in {c}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

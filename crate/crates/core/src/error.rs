use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("zero-norm {0}")]
    ZeroNorm(&'static str),

    #[error("missing entries in evaluation matrix: {0}")]
    MissingEntries(String),

    #[error("no detectors registered")]
    EmptyRouter,

    #[error("format version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI error record and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotScalar(_) => "not_scalar",
            Error::TapeConsumed => "tape_consumed",
            Error::UnknownParam(_) => "unknown_param",
            Error::EmptyDataset => "empty_dataset",
            Error::ZeroNorm(_) => "zero_norm",
            Error::MissingEntries(_) => "missing_entries",
            Error::EmptyRouter => "empty_router",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::ResumeMismatch(_) => "resume_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

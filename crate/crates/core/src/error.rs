use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate subset: {0}")]
    DegenerateSubset(String),
    #[error("index {index} out of range for axis of length {len}")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample {0} has no modality tag")]
    MissingModalityTag(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("cannot normalize zero-norm vector: {0}")]
    Normalization(String),
    #[error("retrieval protocol violated: {0}")]
    Protocol(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short name of the variant, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateSubset(_) => "DegenerateSubset",
            Error::Index { .. } => "IndexError",
            Error::Shape(_) => "ShapeError",
            Error::Config(_) => "ConfigError",
            Error::MissingModalityTag(_) => "MissingModalityTag",
            Error::InsufficientData(_) => "InsufficientData",
            Error::Sampler(_) => "SamplerError",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::Normalization(_) => "NormalizationError",
            Error::Protocol(_) => "ProtocolError",
            Error::Format { .. } => "FormatError",
            Error::Io(_) => "IoError",
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture parse error at token {index} ({token:?}): {message}")]
    Parse {
        index: usize,
        token: String,
        message: String,
    },

    #[error("mask does not fit network: {0}")]
    Mask(String),

    #[error("malformed data file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("precision mismatch: file holds {found}, requested {requested}")]
    Precision { found: String, requested: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. } | Error::InvalidArgument(_) | Error::Mask(_) => ErrorClass::Config,
            Error::Format { .. }
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::Precision { .. }
            | Error::EmptyDataset(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::NonFinite(_) | Error::Shape(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

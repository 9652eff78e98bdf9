use std::path::PathBuf;

use ebcn_diff::DiffError;

/// Coarse failure class, mapped to process exit codes by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("sequence has {positions} positions, limit is {max}")]
    TooManyPositions { positions: usize, max: usize },

    #[error("representation incompatibility: branch `{branch}` expects dim {expected}, view has dim {actual}")]
    RepresentationIncompatibility {
        branch: String,
        expected: usize,
        actual: usize,
    },

    #[error("unknown corruption kind `{kind}` (registered: {registered})")]
    UnknownKind { kind: String, registered: String },

    #[error("cache header field `{field}` invalid: {detail}")]
    BadHeader { field: &'static str, detail: String },

    #[error("truncated file at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("{0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config { .. } | Error::UnknownKind { .. } => Category::Config,
            Error::NonFiniteLoss { .. } => Category::Numeric,
            Error::Diff(DiffError::NonFinite { .. }) => Category::Numeric,
            _ => Category::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

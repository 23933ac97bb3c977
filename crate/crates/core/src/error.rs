use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value does not belong to this tape")]
    NotOnTape,

    #[error("backward requires a 1x1x1x1 loss, got {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported image format")]
    UnsupportedFormat { path: PathBuf },

    #[error("{path}: decode failed: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("{path}: encode failed: {msg}")]
    Encode { path: PathBuf, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch at field `{0}`")]
    ConfigMismatch(String),
}

/// Coarse classes surfaced by the CLI as exit codes and stderr tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorCategory::Config,
            Error::Checkpoint(CheckpointError::ConfigMismatch(_)) => ErrorCategory::Config,
            Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::UnsupportedFormat { .. }
            | Error::Decode { .. }
            | Error::Encode { .. } => ErrorCategory::Io,
            Error::ShapeMismatch { .. } | Error::Shape { .. } => ErrorCategory::Config,
            Error::Domain { .. }
            | Error::NotOnTape
            | Error::NonScalarLoss(_)
            | Error::NonFinite(_)
            | Error::Metric(_) => ErrorCategory::Numeric,
        }
    }
}

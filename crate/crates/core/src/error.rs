use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("value out of range in {op}: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        op: &'static str,
        value: f32,
        lo: f32,
        hi: f32,
    },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("spec hash mismatch for store `{store}`: file has {found}, expected {expected}")]
    SpecHashMismatch {
        store: String,
        expected: String,
        found: String,
    },

    #[error("config hash mismatch on resume: checkpoint has {found}, config gives {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("unsupported image {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
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

    /// Stable machine-readable code, one per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::InvalidArgument { .. } => "E_ARG",
            Error::OutOfRange { .. } => "E_RANGE",
            Error::MissingGradient(_) => "E_NOGRAD",
            Error::CorruptCheckpoint { .. } => "E_CKPT_CORRUPT",
            Error::BadMagic { .. } => "E_CKPT_MAGIC",
            Error::SpecHashMismatch { .. } => "E_CKPT_SPEC",
            Error::ConfigHashMismatch { .. } => "E_CONFIG_HASH",
            Error::UnsupportedImage { .. } => "E_IMAGE",
            Error::Data(_) => "E_DATA",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}

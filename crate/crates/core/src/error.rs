//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not satisfy its contract.
    /// The message names the offending dimension.
    #[error("{op}: {message}")]
    ShapeMismatch { op: &'static str, message: String },

    /// A tensor value became NaN or infinite.
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// `grad_check` was handed a closure that does not produce a scalar.
    #[error("grad_check: closure output must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Scene description cannot be rendered.
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    /// Training loss went non-finite; reports the step and the first term
    /// that broke.
    #[error("non-finite loss at step {step}: term {term}")]
    NonFiniteLoss { step: usize, term: String },

    /// A metric was requested over an empty pixel set.
    #[error("{op}: no valid pixels")]
    EmptyMask { op: &'static str },

    /// Depth metric inputs must be strictly positive under the log.
    #[error("depth_metrics: non-positive depth at pixel {index} ({which})")]
    NonPositiveDepth { index: usize, which: &'static str },

    /// File format violation (PPM/PFM/checkpoint).
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Manifest line failed to parse or referenced a missing file.
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Forward integration diverged (max |value| above the guard, or NaN/Inf).
    #[error("solution blew up at step {step}")]
    BlowUp { step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A linear system that must be invertible was not.
    #[error("singular system: {0}")]
    Singular(String),

    #[error("snapshot format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    LengthMismatch { expected: u64, actual: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that come from numerics (divergence, singular systems)
    /// rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::BlowUp { .. } | Error::Singular(_) | Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

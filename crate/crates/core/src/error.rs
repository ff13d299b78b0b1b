//! Crate-wide error type.

use crate::volgrid::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad volume file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("dimension mismatch: {left} vs {right}")]
    DimsMismatch { left: Dims, right: Dims },

    #[error("index out of range: {what}")]
    OutOfRange { what: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("phantom generation failed: reached volume fraction {achieved:.4} of target {target:.4} before exhausting the placement budget")]
    PlacementBudget { achieved: f64, target: f64 },

    #[error("non-finite loss at iteration {iteration} (lr={lr})")]
    NanLoss { iteration: u64, lr: f64 },

    #[error("non-finite gradient in parameter {name}")]
    NanGradient { name: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

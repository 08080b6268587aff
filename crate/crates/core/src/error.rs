use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the optimization engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation6D(String),
    #[error("degenerate baseline: relative translation norm {0:e} below threshold")]
    DegenerateBaseline(f64),
    #[error("degenerate epipolar line: both line normals vanish (point at the epipole)")]
    DegenerateEpipolarLine,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("every Gaussian is below the opacity threshold {0}")]
    AllDead(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("scene graph has no usable edges")]
    EmptyGraph,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by numbers or data content rather than usage or I/O.
    pub fn is_numeric(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

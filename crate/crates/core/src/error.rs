use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("interaction matrix is not positive semidefinite: quadratic form {0:e}")]
    NonPsd(f64),

    #[error("transported mass {0} is outside (0, 1]")]
    MassOutOfRange(f64),

    #[error("noise ratio {0}")]
    RatioOutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("embedding norm below 1e-12 at row {0}")]
    ZeroVector(usize),

    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("row count mismatch: {x} rows of x, {y} rows of y")]
    LengthMismatch { x: usize, y: usize },

    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint checksum mismatch or truncated file")]
    CorruptChecksum,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the mapping engine and its tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("scene generation failed: {0}")]
    Scene(String),

    #[error("voxel coordinate ({0}, {1}, {2}) is outside the packable range of +/-2^20")]
    CoordOverflow(i64, i64, i64),

    #[error("map is empty")]
    EmptyMap,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-instance: {0}")]
    EmptyInstance(&'static str),
    #[error("spec-mismatch: range images were built with different lidar specs")]
    SpecMismatch,
    #[error("no-ground: ground model has no points")]
    NoGround,
    #[error("empty-batch: {0} feature batch is empty")]
    EmptyBatch(&'static str),
    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid-mismatch: rasters were built on different BEV grids")]
    GridMismatch,
    #[error("cardinality-mismatch: {pred} predictions vs {gt} targets")]
    CardinalityMismatch { pred: usize, gt: usize },
    #[error("frame-mismatch: {0}")]
    FrameMismatch(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

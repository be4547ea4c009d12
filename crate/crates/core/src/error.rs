use std::path::PathBuf;

use crate::ssvm::SolveReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate contour")]
    DegenerateContour,

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dangling fragment: polyline {0} is not in the edge map")]
    DanglingFragment(u32),

    #[error("invalid latent assignment: {0}")]
    InvalidLatent(String),

    #[error("{path}: {message}")]
    Malformed { path: String, message: String },

    #[error("model version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("no ground truth to evaluate against")]
    NoGroundTruth,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("solver did not converge after {} iterations", .0.iterations)]
    NonConvergence(Box<SolveReport>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Malformed { path: path.into(), message: message.into() }
    }
}

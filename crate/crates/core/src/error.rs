use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite activation at step {step}, layer {layer}")]
    NonFiniteActivation { step: usize, layer: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("variance must be strictly positive")]
    NonPositiveVariance,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no trajectories")]
    EmptyDataset,

    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),

    #[error("trajectory too short: length {len}, need at least {min}")]
    TrajectoryTooShort { len: usize, min: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no learnable regularizers in mode `{0}`")]
    NoLearnableRegularizers(String),

    #[error("rejection sampling failed after {0} attempts")]
    RejectionFailed(usize),

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

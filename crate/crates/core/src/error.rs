use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vector is not unit-norm (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("requested {k} neighbors but the support set holds {available} entries")]
    NotEnoughEntries { k: usize, available: usize },

    #[error("mixed neighbor {index} is the zero vector")]
    ZeroMixedNeighbor { index: usize },

    #[error("missing hidden label: {0}")]
    MissingLabel(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("stale tape: recorded against parameter generation {tape}, network is at {network}")]
    StaleTape { tape: u64, network: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

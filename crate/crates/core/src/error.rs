use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: operands live on different spatial grids")]
    GridMismatch,

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("negative time {0} for a semigroup that is not a group")]
    NegativeTime(f64),

    #[error("operator variant `{0}` does not generate a group")]
    NotAGroup(&'static str),

    #[error("operator has no declared unit eigenstructure")]
    MissingEigenstructure,

    #[error("control atom is not in the nonnegative cone (min value {0:e})")]
    NotInCone(f64),

    #[error("atom time {0} is not aligned with the time grid")]
    OffGrid(f64),

    #[error("initial state exceeds the base capacity level at nodes {nodes:?}")]
    InitialOverCapacity { nodes: Vec<usize> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("infinite bound on {0}; run bound propagation first")]
    InfiniteBound(String),
    #[error("projection infeasible: demand {demand} outside [{min}, {max}]")]
    ProjectionInfeasible { demand: f64, min: f64, max: f64 },
    #[error("lower-level problem infeasible at the given input")]
    InfeasibleLowerLevel,
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

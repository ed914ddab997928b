use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input")]
    EmptyInput,

    /// Residuals do not span the output space; the log-determinant cost is
    /// undefined at this weight vector.
    #[error("residual covariance is singular")]
    SingularCovariance,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("all {} optimizer starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    /// The full-model optimum is worse than the restricted one by more than
    /// optimizer slack.
    #[error("{statistic} = {value:e} is negative beyond slack; full fit is worse than restricted fit")]
    InconsistentStatistic { statistic: &'static str, value: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

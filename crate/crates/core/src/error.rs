use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for dataset of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    /// A step size or contraction constant falls outside the range a bound
    /// was proven for. `constraint` names the violated inequality.
    #[error("inadmissible parameters: {constraint}")]
    Inadmissible { constraint: String },

    #[error("minibatch enumeration infeasible: C({n},{b}) = {count} exceeds {limit}")]
    EnumerationTooLarge {
        n: usize,
        b: usize,
        count: f64,
        limit: usize,
    },

    #[error("sample size {n} exceeds assignment cap {cap}; subsample the clouds first")]
    AssignmentCap { n: usize, cap: usize },

    #[error("bound value is not representable as f64 (log value {log_value})")]
    NotRepresentable { log_value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn inadmissible(constraint: impl Into<String>) -> Self {
        Error::Inadmissible {
            constraint: constraint.into(),
        }
    }
}

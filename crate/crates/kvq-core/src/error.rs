//! Error type shared by every module in the crate.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, KvqError>;

/// Errors emitted by tensor ops, model construction, data loading, and metrics.
#[derive(Debug, thiserror::Error)]
pub enum KvqError {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates a documented constraint.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is unusable (too short, wrong range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A record in an annotation file failed validation.
    #[error("validation error at line {line}: {msg}")]
    Validation { line: usize, msg: String },

    /// Predictions do not cover every annotated item.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// A metric is undefined on the given input (e.g. zero variance).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A numerical abort (NaN/Inf encountered where finite values are required).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file has an unrecognized or corrupt format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl KvqError {
    pub fn shape(msg: impl Into<String>) -> Self {
        KvqError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        KvqError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        KvqError::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        KvqError::Input(msg.into())
    }
}

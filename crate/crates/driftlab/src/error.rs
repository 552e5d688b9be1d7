//! Crate-wide error type.
//!
//! Variants map onto the failure categories surfaced at the API boundary:
//! shape/dimension problems, non-finite numerics, invalid configuration,
//! malformed input data, and protocol misuse (calling an operation in a
//! state where it is undefined, e.g. a task transition at task 1).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up; `op` names the operation or layer.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Invalid or inconsistent configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a dataset-level requirement.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file; `line` is 1-based.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Operation called in a state where it is undefined.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Importance estimation could not be carried out.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Results cannot be aggregated together.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }

    /// Stable category code used as the process exit code by the CLI.
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } => 3,
            Error::Shape { .. } | Error::NonFinite { .. } => 4,
            Error::Protocol(_) | Error::Estimation(_) => 5,
            Error::Aggregation(_) | Error::Snapshot(_) => 6,
            Error::Io(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

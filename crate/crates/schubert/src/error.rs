use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// validation/format errors exit 1, infeasible pruning targets exit 2,
/// non-finite numerics exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("numeric failure at step {step}: {source}")]
    Numeric { step: usize, source: Box<Error> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(
        "pruning target infeasible: requested {requested} objective units, \
         at most {achievable} removable under the size-one lower bounds"
    )]
    Infeasible { requested: u64, achievable: u64 },

    #[error("malformed record at line {line}: {message}")]
    Record { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

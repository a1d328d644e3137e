//! Shared error type for the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes for a matrix or tape operation.
    #[error("{op}: dimension mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    DimMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A softmax row with every entry masked out.
    #[error("row {row} is fully masked; softmax over it is undefined")]
    DegenerateRow { row: usize },

    /// LU factorization hit a zero pivot.
    #[error("matrix is singular at pivot {pivot}")]
    Singular { pivot: usize },

    /// A hyperparameter or configuration value outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An API contract was violated (wrong output shape, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Category index outside the table built at training time.
    #[error("unknown category {index} (table has {bound} categories)")]
    UnknownCategory { index: usize, bound: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed dataset / checkpoint line; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training diverged; carries the failing step and the last finite loss.
    #[error("loss became non-finite at step {step} (last finite loss {last_finite})")]
    NonFiniteLoss { step: usize, last_finite: f64 },
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::DimMismatch {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    /// Process exit category used by the command-line frontend.
    pub fn exit_category(&self) -> i32 {
        match self {
            Error::InvalidParam(_) => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::NonFiniteLoss { .. } => 5,
            _ => 4,
        }
    }
}

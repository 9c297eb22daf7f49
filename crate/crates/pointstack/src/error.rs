//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes; both shapes are named.
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    /// `backward` was called before any op was recorded.
    #[error("backward called on an empty computation record")]
    EmptyRecord,

    /// Text-format parse failure with the offending line number.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Binary-container failure (bad magic, truncation, version skew).
    #[error("{0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EmptyRecord => "empty-record",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: format!("{}x{}", lhs.0, lhs.1),
        rhs: format!("{}x{}", rhs.0, rhs.1),
    }
}

//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. The variants are
//! grouped so that callers (notably the CLI) can map failures onto coarse
//! categories: invalid arguments/preconditions, malformed data or files, and
//! numerical failures (NaN losses, divergence).

use crate::numerics::DType;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch in a tensor primitive. Carries the op name and the
    /// offending dimensions.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// float32/float64 operands mixed in one primitive.
    #[error("dtype mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    DtypeMix {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },

    /// A precondition on an argument or configuration was violated.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// NaN or divergence detected during optimization or evaluation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file did not parse. `offset` is the byte offset at which the
    /// problem was detected (line number for text formats).
    #[error("format error in {source_name} at offset {offset}: {detail}")]
    Format {
        source_name: String,
        offset: u64,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }

    pub fn numerical(detail: impl Into<String>) -> Self {
        Error::Numerical(detail.into())
    }

    pub fn format(source_name: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Coarse category used by the CLI to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Numerical(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad data, bad file, bad configuration value.
    Data,
    /// NaN, divergence, or other numerical failure.
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;

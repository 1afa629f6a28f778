use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} has norm below the degenerate threshold")]
    DegenerateRow { row: usize },
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed label row {row}: {reason}")]
    MalformedLabel { row: usize, reason: String },
    #[error("matrix is identically zero; step size is unbounded")]
    ZeroMatrix,
    #[error("no samples classified at coverage {coverage}")]
    EmptySelection { coverage: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}

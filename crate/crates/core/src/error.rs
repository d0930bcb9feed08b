use thiserror::Error;

/// Errors raised by the geometric and numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Caller violated a precondition (lengths, shapes, manifold identity).
    #[error("usage error: {0}")]
    Usage(String),

    /// The inputs are well-formed but the math is undefined or unrepresentable.
    #[error("numeric-domain error: {0}")]
    NumericDomain(String),

    /// A forward value or update produced NaN or infinity.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::NumericDomain(msg.into())
}

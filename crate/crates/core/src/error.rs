use thiserror::Error;

/// Errors raised by the deconvolution engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arguments or malformed input supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),
    /// A value outside the mathematical domain of an operation (NaN, infinity, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical procedure failed (underflowing truncation mass, quadrature non-convergence).
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of a numerical routine, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

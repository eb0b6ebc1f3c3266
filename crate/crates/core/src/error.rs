use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input violated an operation's domain (shape, range, or sign constraints).
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative routine failed to converge or a matrix was too ill-conditioned.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A training or distillation loop produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

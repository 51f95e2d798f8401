use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A numeric quantity turned non-finite.
    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Graph misuse (backward without forward, double backward, ...).
    #[error("autodiff misuse: {0}")]
    Autodiff(String),

    /// Checkpoint I/O or format failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite {
            what: what.into(),
            step: None,
        }
    }
}

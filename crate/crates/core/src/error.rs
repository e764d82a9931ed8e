use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A finite-difference probe produced a non-finite loss.
    #[error("gradient oracle failure at entry ({row}, {col}): non-finite evaluation")]
    OracleFailure { row: usize, col: usize },
    #[error("no roles registered")]
    NoRoles,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
    #[error("turn {turn}: {source}")]
    AtTurn { turn: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A factorization or solve failed on inputs that passed validation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    /// The model is not in a state the operation can use (e.g. never trained).
    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

use thiserror::Error;

use crate::netgraph::NetError;
use crate::tensor::TensorError;

/// Errors surfaced by the training, distillation and search layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Bad caller input: mismatched resolutions, out-of-space choices,
    /// inapplicable actions, malformed files.
    #[error("invalid input: {0}")]
    Input(String),
    /// Training produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures caused by arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Tensor(TensorError::NonFinite { .. })
                | Error::Net(NetError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

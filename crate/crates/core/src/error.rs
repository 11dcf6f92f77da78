use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine, the data layer or the trainer.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A binary file (volume or checkpoint) is malformed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A loss became NaN or infinite during training.
    #[error("non-finite loss {value} on decoder {decoder} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        decoder: usize,
        value: f64,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration field failed validation. `field` is the dotted path,
    /// e.g. `model.rep_left_context`.
    #[error("{field}: {message}")]
    Config { field: String, message: String },

    #[error("stream state is stale: the encoder was modified after the stream was opened")]
    StaleState,

    #[error("training diverged at step {step} (last finite loss {last_finite_loss:?} at step {last_finite_step:?})")]
    Diverged {
        step: usize,
        last_finite_step: Option<usize>,
        last_finite_loss: Option<f64>,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint config digest mismatch: checkpoint was written for a different model configuration")]
    DigestMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

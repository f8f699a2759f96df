//! Error type shared across dataset, checkpoint, and training paths.
//!
//! Shape violations inside the tensor graph panic instead (they indicate
//! programming errors, not bad input); everything reachable from user input
//! flows through `Error`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// A record in a dataset file failed validation.
    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Checkpoint and dataset (or CLI arguments) disagree.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss ({value}) at {batch}")]
    NonFiniteLoss { batch: String, value: f64 },
}

impl Error {
    /// Process exit code: 2 for input-validation failures, 1 for runtime
    /// failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::DataFormat { .. }
            | Error::Config(_)
            | Error::Checkpoint(_)
            | Error::Mismatch(_) => 2,
            Error::Io(_) | Error::MissingGradient(_) | Error::NonFiniteLoss { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

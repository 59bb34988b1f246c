use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration problems are distinguished from runtime failures so the
    /// command line can map them to different exit codes.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Diff(DiffError::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

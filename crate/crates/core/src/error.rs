use std::io;

use bit_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BitError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("replay buffer holds {size} transitions, {requested} requested")]
    NotReady { size: usize, requested: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BitError> = std::result::Result<T, E>;

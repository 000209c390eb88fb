use std::path::PathBuf;

use sonoseg_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Item { path: PathBuf, message: String },
    #[error("data: {0}")]
    Data(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was written for a different network:\n  {}", .0.join("\n  "))]
    ConfigMismatch(Vec<String>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn item(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Item {
            path: path.into(),
            message: message.into(),
        }
    }
}

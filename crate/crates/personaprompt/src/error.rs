use std::path::{Path, PathBuf};

use personaprompt_core::Error as CoreError;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("missing {what}: {}", path.display())]
    Missing { what: String, path: PathBuf },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn missing(what: impl Into<String>, path: impl AsRef<Path>) -> Self {
        Error::Missing { what: what.into(), path: path.as_ref().to_path_buf() }
    }

    /// Process exit code: 2 input or schema, 3 insufficient data, 4 training
    /// failure, 5 missing prerequisite.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                CoreError::InsufficientPersonas { .. }
                | CoreError::TooFewPairs { .. }
                | CoreError::InsufficientGeneralPairs { .. }
                | CoreError::EmptyCorpus
                | CoreError::EmptyPool { .. } => 3,
                CoreError::TrainingFailure { .. } => 4,
                _ => 2,
            },
            // A prerequisite artifact that is absent or does not load.
            Error::Missing { .. } | Error::Checkpoint(_) => 5,
            Error::Io { .. } | Error::Schema { .. } | Error::Config { .. } | Error::Usage(_) => 2,
        }
    }
}

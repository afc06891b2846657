use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("missing {}: run `dlatent {producer}` for this run first", path.display())]
    Missing { path: PathBuf, producer: &'static str },

    #[error("run directory {} is locked by another process (remove the lock file if it is stale)", path.display())]
    Locked { path: PathBuf },

    #[error(transparent)]
    Core(#[from] dlatent::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use dlatent::Error as E;
        match self {
            CliError::Config(_) | CliError::Locked { .. } => EXIT_CONFIG,
            CliError::Missing { .. } => EXIT_MISSING,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            CliError::Io { .. } => EXIT_OTHER,
            CliError::Core(e) => match e {
                E::Numerical(_) => EXIT_NUMERICAL,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                E::Io { .. } | E::Tensor(_) => EXIT_OTHER,
                E::Config(_)
                | E::Shape(_)
                | E::InvalidInput(_)
                | E::SubsetTooLarge { .. }
                | E::Parse(_)
                | E::CheckpointMismatch(_)
                | E::Json(_) => EXIT_CONFIG,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} gradient check(s) exceeded the tolerance")]
    GradCheckFailed(usize),

    #[error(transparent)]
    Core(#[from] metagait::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 3 for a non-finite loss, 1 for a failed gradient
    /// check, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(metagait::Error::NonFiniteLoss { .. }) => 3,
            CliError::GradCheckFailed(_) => 1,
            _ => 2,
        }
    }
}

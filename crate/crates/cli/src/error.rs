use std::path::{Path, PathBuf};

use jmls_core::JmlsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: JmlsError },

    #[error(transparent)]
    Core(#[from] JmlsError),
}

impl CliError {
    /// 2 for bad configuration or input files, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn file(path: &Path, source: impl Into<JmlsError>) -> Self {
        CliError::File { path: path.to_path_buf(), source: source.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

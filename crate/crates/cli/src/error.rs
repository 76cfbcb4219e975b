use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tga_core::Error),

    #[error("{0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
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

    /// 4 for numerical failures, 3 for everything about inputs and files.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Core(tga_core::Error::NonFinite(_)) => ExitCode::from(4),
            _ => ExitCode::from(3),
        }
    }
}

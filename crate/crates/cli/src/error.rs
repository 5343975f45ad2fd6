use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is unreadable or invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An earlier stage has not produced a file this stage needs.
    #[error("missing prerequisite {} (run `{stage}` first)", path.display())]
    Prerequisite { path: PathBuf, stage: &'static str },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} is not valid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Core(#[from] masterface::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that failed at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

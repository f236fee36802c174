use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{source_name} line {line}: {key}: {msg}")]
    Config {
        source_name: String,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("{key}: {msg}")]
    Field { key: String, msg: String },

    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] tkit_core::Error),
}

impl CliError {
    pub fn field(key: &str, msg: impl Into<String>) -> Self {
        CliError::Field {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

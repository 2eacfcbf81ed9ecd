use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {reason} (at byte offset {offset})", file.display())]
    Parse {
        file: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown preset `{name}` (valid presets: {})", valid.join(", "))]
    UnknownPreset { name: String, valid: Vec<String> },

    #[error("frustum sampling failed after {attempts} attempts")]
    SamplingFailed { attempts: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty flow field")]
    EmptyFlow,
}

impl Error {
    pub(crate) fn parse(file: impl Into<PathBuf>, offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

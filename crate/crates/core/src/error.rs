use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; `key` names the offending field.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in `{path}`: {message}")]
    Numeric { path: String, message: String },

    #[error("invalid parameter `{name}`: {message}")]
    Parameter { name: String, message: String },

    #[error("ingestion error in {path}{}: {message}", location(*.row, .column.as_deref()))]
    Ingestion {
        path: PathBuf,
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged during {phase} at epoch {epoch}: loss is not finite")]
    Divergence { phase: String, epoch: usize },

    #[error("{path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
}

fn location(row: Option<usize>, column: Option<&str>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" (row {r}, column `{c}`)"),
        (Some(r), None) => format!(" (row {r})"),
        (None, Some(c)) => format!(" (column `{c}`)"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn param(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            message: message.into(),
        }
    }

    pub fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    /// True for errors caused by the user's configuration rather than by
    /// the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

use std::path::PathBuf;

/// Failures of a CLI run, split by exit code: configuration problems (2) are
/// reported before any computation starts, everything else (1) is a runtime
/// failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] iwd_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl std::fmt::Display) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigFile { .. } | CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

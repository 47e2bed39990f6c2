use std::path::{Path, PathBuf};

use thiserror::Error;

/// Pipeline failure, classified by exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, unparsable or invalid config, stale manifest.
    #[error("config: {0}")]
    Config(String),
    #[error("stale manifest: {0} (rerun the upstream stage or pass --force)")]
    Stale(String),
    #[error("missing artifact {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    /// Malformed or inconsistent input data.
    #[error("data: {0}")]
    Data(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Stale(_) => 1,
            Error::Missing { .. } | Error::Data(_) | Error::Io { .. } => 2,
            Error::Internal(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn data(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        Error::Data(format!("{context}: {err}"))
    }

    /// Short machine-readable kind for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Stale(_) => "stale_manifest",
            Error::Missing { .. } => "missing_artifact",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] marnet_core::error::Error),
    #[error("{path}: {inner}")]
    In { path: PathBuf, inner: Box<IoError> },
}

impl IoError {
    pub fn at(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    /// Short machine-readable class of the error.
    pub fn category(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io",
            IoError::Format(_) => "format",
            IoError::Config(_) => "config",
            IoError::Core(_) => "core",
            IoError::In { inner, .. } => inner.category(),
        }
    }

    /// Attaches the file the error came from.
    pub fn context(self, path: &Path) -> Self {
        match self {
            e @ (IoError::Io { .. } | IoError::In { .. }) => e,
            e => IoError::In { path: path.to_path_buf(), inner: Box::new(e) },
        }
    }
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

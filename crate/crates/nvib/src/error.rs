use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] nvib_core::Error),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged { step: usize, last_good: Option<PathBuf> },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 for problems with the invocation or its inputs,
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Format { .. } => 1,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Error::Core(nvib_core::Error::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("cannot decode {}: {detail}", path.display())]
    Decode { path: PathBuf, detail: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Contract(String),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] lfsamba::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::NotFound(path)
        } else {
            DataError::Io { path, source }
        }
    }

    /// True for failures of the file system rather than of the content.
    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. } | DataError::NotFound(_))
    }
}

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("item index {index} is out of vocabulary (num_items = {num_items})")]
    OutOfVocabulary { index: usize, num_items: usize },
    #[error("user {user} has {len} interactions; leave-one-out needs at least 3")]
    SequenceTooShort { user: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint shape mismatch: run expects {expected}, file holds {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::model::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Rss(#[from] crate::ingest::rss::RssError),

    #[error(transparent)]
    Fetch(#[from] crate::ingest::fetch::FetchError),

    #[error("audio: {0}")]
    Audio(String),

    #[error("no language-id result for document {0}")]
    MissingLanguageResult(String),

    #[error("worker: {0}")]
    Worker(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} cannot run: {reason}")]
    StageOrder { stage: Stage, reason: String },

    #[error("run interrupted at {stage} after {shards} shard(s)")]
    Interrupted { stage: Stage, shards: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        Error::Audio(e.to_string())
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("malformed prompt: {0}")]
    MalformedPrompt(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported model-db file: {0}")]
    UnsupportedModelDb(String),

    #[error("unsupported stats-db file: {0}")]
    UnsupportedStatsDb(String),

    #[error("unsupported k-gram model file: {0}")]
    UnsupportedKGramFile(String),

    #[error("corpus too large for format v1 ({0} tokens)")]
    CorpusTooLarge(usize),

    #[error("suffix array invariant violated at rank {0}")]
    UnsortedSuffixArray(usize),

    #[error("step outcome and access log disagree: {0}")]
    MismatchedTrace(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::AdapterError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("n-gram model: {0}")]
    Ngram(String),

    #[error("classifier: {0}")]
    Classifier(String),

    /// A term evaluator failed; carries the term name.
    #[error("energy term `{term}`: {message}")]
    Energy { term: String, message: String },

    #[error("proposal: {0}")]
    Proposal(String),

    #[error("non-finite acceptance ratio")]
    NonFiniteAcceptance,

    #[error("state space has {size} sequences, exceeding the cap of {cap}")]
    SpaceTooLarge { size: usize, cap: usize },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("judge `{judge}`: {message}")]
    Judge { judge: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Adapter(#[from] AdapterError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn energy(term: impl Into<String>, message: impl ToString) -> Self {
        Error::Energy {
            term: term.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad configuration or usage rather than a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

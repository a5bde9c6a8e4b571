use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CvaError {
    #[error("malformed trajectory {question_id}: {reason}")]
    MalformedTrajectory { question_id: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no training events")]
    NoTrainingEvents,

    #[error("parameter missing from model: {0}")]
    UnknownParameter(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("concentration parameter unidentifiable: {0}")]
    Unidentifiable(String),
}

impl CvaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(question_id: &str, reason: impl Into<String>) -> Self {
        CvaError::MalformedTrajectory {
            question_id: question_id.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CvaError>;

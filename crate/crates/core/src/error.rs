use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown class {0:?}")]
    Roster(String),

    #[error("missing embedding for class(es): {}", .0.join(", "))]
    MissingEmbedding(Vec<String>),

    #[error("embedding format error: {0}")]
    EmbeddingFormat(String),

    #[error("non-finite gradient in parameter {name} at index {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 1 for configuration and input
    /// problems, 2 for protocol and contract violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Protocol(_)
            | Error::Contract(_)
            | Error::Shape { .. }
            | Error::NonFiniteGradient { .. }
            | Error::UndefinedMetric(_) => 2,
            _ => 1,
        }
    }
}

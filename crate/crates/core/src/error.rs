use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the modeling stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{field} id {id} outside vocabulary of size {size}")]
    Vocabulary {
        field: &'static str,
        id: u64,
        size: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate projection: row {row} has norm {norm:e} after orthogonalization")]
    Degenerate { row: usize, norm: f64 },

    #[error("closure is not deterministic: {0}")]
    Determinism(String),

    #[error("triple (P={p}, R={r}, B={b}) contradicts the causal assumption")]
    Contradiction { p: u8, r: u8, b: u8 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing or invalid key `{key}`")]
    Schema { line: usize, key: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

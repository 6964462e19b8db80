use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty input with shape {shape:?}")]
    EmptyInput { op: &'static str, shape: [usize; 4] },
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: expected {expected}, found {actual}")]
    Format { expected: String, actual: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("forward pass is not deterministic: {0}")]
    Determinism(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("build error at stage {stage}: {reason}")]
    Build { stage: usize, reason: String },
    #[error("unknown layer `{name}`, available: {available:?}")]
    UnknownLayer {
        name: String,
        available: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum LexError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A LEXA file or manifest could not be decoded.
    #[error("{file}: {cause}")]
    Format { file: String, cause: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// The requested quantity is mathematically undefined for these inputs.
    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("no synonym coverage for word `{0}`")]
    NoSynonymCoverage(String),

    #[error("requested {requested} components but achievable rank is {achievable}")]
    Rank { requested: usize, achievable: usize },

    #[error("optimizer did not converge after {iterations} iterations (gradient inf-norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = LexError> = std::result::Result<T, E>;

impl LexError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LexError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, cause: impl Into<String>) -> Self {
        LexError::Format {
            file: file.into(),
            cause: cause.into(),
        }
    }
}

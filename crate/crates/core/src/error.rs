use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A non-finite value surfaced while evaluating one named loss term.
    #[error("numeric failure in loss term `{term}`: {source}")]
    LossTerm {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gradient check unreliable: {0}")]
    Unreliable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(PathBuf),

    #[error("path not found: {0}")]
    MissingPath(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::LossTerm { term, source: Box::new(self) }
    }

    /// True for errors caused by NaN/Inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Unreliable(_) => true,
            Error::LossTerm { source, .. } | Error::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

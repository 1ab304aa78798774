use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("index {index} out of range for {len} {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (tgt={tgt}, obs={obs:?}, cos={cos:?}, mse={mse:?})"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        tgt: f64,
        obs: Option<f64>,
        cos: Option<f64>,
        mse: Option<f64>,
    },

    #[error("missing loss term: {0}")]
    MissingLoss(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Protocol(_) => "protocol",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::MissingLoss(_) => "missing_loss",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

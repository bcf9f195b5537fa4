use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A layer or segment received a tensor it cannot consume.
    #[error("configuration error at {layer}: {message}")]
    Config { layer: String, message: String },

    /// An API was used out of order, e.g. backward without a forward cache.
    #[error("usage error: {0}")]
    Usage(String),

    /// A structural invariant (cut validity, simplex weights, ...) does not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// The split-learning message exchange went wrong.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation group error for clients {clients:?}: {message}")]
    Aggregation { clients: Vec<usize>, message: String },

    #[error("search space too large: {size} assignments exceeds limit {limit}")]
    SearchSpace { size: u128, limit: u128 },

    #[error("invalid idx file: {0}")]
    Idx(#[from] crate::data::idx::IdxError),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("missing frozen classifier for domain {domain}: {hint}")]
    MissingClassifier { domain: usize, hint: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

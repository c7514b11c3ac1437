use std::path::PathBuf;

use thiserror::Error;

use crate::identity::IdentityId;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("no bias: biased identities need more samples ({n1}) than unbiased ones ({n2})")]
    NoBias { n1: u64, n2: u64 },

    #[error("invalid generator model: {0}")]
    InvalidGenerator(String),

    #[error("invalid classifier model: {0}")]
    InvalidClassifier(String),

    #[error("unknown classifier preset `{0}` (expected one of: vggface2, casia)")]
    UnknownPreset(String),

    #[error("invalid memorization schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid attack configuration: {0}")]
    InvalidAttack(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("identity {id} is outside the known identity space [0, {yf_size})")]
    IdentityOutOfRange { id: IdentityId, yf_size: usize },

    #[error("biased evaluation requested but the dataset has no biased subset")]
    NoBiasedSubset,

    #[error("identity {0} has no embeddings")]
    UnknownIdentity(IdentityId),

    #[error("no embedding for sample `{0}`")]
    MissingEmbedding(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

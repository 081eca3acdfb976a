use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation graph is not acyclic: node {node} reads node {input}")]
    GraphCycle { node: usize, input: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("zero-norm vector under cosine similarity")]
    ZeroNorm,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("episode is done; call reset before stepping")]
    EpisodeDone,

    #[error("unknown camera `{0}`")]
    UnknownCamera(String),

    #[error("replay buffer holds {have} transitions, {need} requested")]
    Underfilled { have: usize, need: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected}); migrate the file with a matching release")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint blob `{0}` failed its checksum")]
    Checksum(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("numerical abort at env step {env_step}: {detail}")]
    NumericalAbort { env_step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

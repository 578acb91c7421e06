use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("audio too short: {samples} samples, need at least {required}")]
    AudioTooShort { samples: usize, required: usize },

    #[error("frame shift {from_us} us cannot be resampled to {to_us} us (non-integer ratio)")]
    NonIntegerRatio { from_us: u32, to_us: u32 },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("token {token:?} is not in the vocabulary")]
    OutOfVocabulary { token: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target of length {target_len} cannot be aligned to {frames} frames")]
    Unsatisfiable { target_len: usize, frames: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("no word in the lexicon can be aligned to {frames} frames")]
    NoAlignment { frames: usize },

    #[error("N-best entry {index} is missing the {system:?} cost")]
    MissingCost { index: usize, system: String },

    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

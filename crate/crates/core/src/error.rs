use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("scene {scene}: invalid {field}: {msg}")]
    InvalidScene { scene: String, field: String, msg: String },
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("synthetic generation: {0}")]
    Synthesis(String),
    #[error("feature file {path}: {msg}")]
    FeatureFile { path: PathBuf, msg: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found:?} is not supported (expected {expected:?})")]
    CheckpointVersion { found: String, expected: String },
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("missing score map for pair ({image_id}, {subject_id}, {object_id})")]
    MissingScores { image_id: String, subject_id: i64, object_id: i64 },
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid_scene(scene: &str, field: &str, msg: impl Into<String>) -> Self {
        Error::InvalidScene { scene: scene.to_string(), field: field.to_string(), msg: msg.into() }
    }
}

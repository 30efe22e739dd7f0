use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("expected mono audio, found {0} channels")]
    ChannelCount(u16),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("state corruption: {0}")]
    Corruption(String),
    #[error("training failed: {0}")]
    TrainingFailure(String),
    #[error("noise pool violation: {0}")]
    PoolViolation(String),
    #[error("unknown utterance `{0}`")]
    MissingUtterance(String),
    #[error("enhancer hash mismatch for `{name}`")]
    EnhancerMismatch { name: String },
    #[error("run directory is locked: {}", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

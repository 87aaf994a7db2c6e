use thiserror::Error;

use crate::representations::ClientId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("representation kind mismatch: {0} vs {1}")]
    KindMismatch(&'static str, &'static str),

    #[error("non-finite value at parameter index {index}")]
    NonFinite { index: usize },

    #[error("client {client} diverged at round {round}")]
    Diverged { client: ClientId, round: u64 },

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("theory instance setup: {0}")]
    TheorySetup(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Process exit code used by the CLI and the C ABI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::TomlDe(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

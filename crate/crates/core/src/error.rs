use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GuardianError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GuardianError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate agent id {0}")]
    DuplicateAgent(usize),

    #[error("agent {agent} is not active at round {round}")]
    InactiveAgent { agent: usize, round: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding failed: {0}")]
    Embedding(String),

    #[error("remote agent {agent} failed at round {round}: {reason}")]
    RemoteAgent {
        agent: usize,
        round: usize,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}: {terms}")]
    Training { epoch: usize, terms: String },

    #[error("no active agents remain")]
    EpisodeExhausted,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

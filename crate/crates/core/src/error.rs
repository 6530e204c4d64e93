use promptstream_nd::NdError;
use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = AsrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AsrError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("infeasible alignment: {frames} frames cannot carry a label sequence needing {needed}")]
    InfeasibleAlignment { frames: usize, needed: usize },
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },
    #[error("missing artifact {}: {msg}", path.display())]
    MissingArtifact { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AsrError {
    pub fn config(msg: impl Into<String>) -> Self {
        AsrError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        AsrError::Contract(msg.into())
    }

    /// True for errors caused by malformed or missing input data rather than
    /// by configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            AsrError::Format { .. }
                | AsrError::MissingArtifact { .. }
                | AsrError::Io(_)
                | AsrError::Json(_)
                | AsrError::Nd(NdError::Format { .. })
                | AsrError::Nd(NdError::Io(_))
                | AsrError::Nd(NdError::Json(_))
        )
    }
}

use thiserror::Error;

pub type Result<T, E = NdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("attention mask admits no key for query row {row}")]
    InvalidMask { row: usize },
    #[error("target index {index} out of range for {classes} classes")]
    Target { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NdError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NdError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

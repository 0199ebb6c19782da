use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimtError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("episode already terminated")]
    Terminated,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimtError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> SimtError {
    SimtError::Shape {
        op,
        detail: detail.into(),
    }
}

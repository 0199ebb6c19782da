//! Failures of a command, grouped by exit code.

use simt_core::SimtError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

pub type LabResult<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Data(_) => 3,
            LabError::Numeric(_) => 4,
            LabError::Other(_) => 1,
        }
    }
}

impl From<SimtError> for LabError {
    fn from(e: SimtError) -> Self {
        let msg = e.to_string();
        match e {
            SimtError::Config(m) => LabError::Config(m),
            SimtError::NonFinite(_) => LabError::Numeric(msg),
            SimtError::Parse { .. } | SimtError::Vocabulary(_) | SimtError::Io(_) | SimtError::Json(_) | SimtError::Empty(_) => LabError::Data(msg),
            _ => LabError::Other(msg),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Data(e.to_string())
    }
}

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum D2kError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("data error: {0}")]
    Value(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl D2kError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        D2kError::Config(msg.into())
    }

    pub(crate) fn data(line: usize, msg: impl Into<String>) -> Self {
        D2kError::Data {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        D2kError::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, D2kError>;

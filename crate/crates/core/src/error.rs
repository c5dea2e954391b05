use thiserror::Error;

/// Errors raised across the library. The variants line up with the CLI exit
/// codes: configuration problems exit 2, data and format problems exit 3.
#[derive(Debug, Error)]
pub enum ElmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error in {layer}: {detail}")]
    Numeric { layer: String, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ElmError {
    pub fn config(msg: impl Into<String>) -> Self {
        ElmError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        ElmError::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        ElmError::Format(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        ElmError::Degenerate(msg.into())
    }

    pub fn numeric(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        ElmError::Numeric {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            ElmError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ElmError>;

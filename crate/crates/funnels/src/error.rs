use thiserror::Error;

#[derive(Debug, Error)]
pub enum FunnelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, FunnelError>;

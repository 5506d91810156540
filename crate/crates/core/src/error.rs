use thiserror::Error;

#[derive(Debug, Error)]
pub enum DaganError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

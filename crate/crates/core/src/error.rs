use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corruption(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use difftrack_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("augmentation error: {0}")]
    Augmentation(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

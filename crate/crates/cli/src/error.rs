use difftrack_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("corrupt input: {0}")]
    Corrupt(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    HashMismatch(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Check(_) => 5,
            CliError::Corrupt(_) => 6,
            CliError::HashMismatch(_) => 7,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::Argument(_) | CoreError::Domain(_) => CliError::Config(msg),
            CoreError::Divergence(_) => CliError::Divergence(msg),
            CoreError::Format(_) | CoreError::Wav(_) => CliError::Corrupt(msg),
            CoreError::Autodiff(difftrack_autodiff::AdError::Checkpoint(_)) => CliError::Corrupt(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

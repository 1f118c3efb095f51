use dabdetr_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) | CliError::Csv(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config { .. } => 2,
                CoreError::Checkpoint(_) | CoreError::Io(_) => 3,
                CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. } | CoreError::Domain { .. } => 4,
                CoreError::Shape { .. } | CoreError::Contract(_) => 3,
            },
        }
    }
}

use concepthash::Error as CoreError;

/// Command failure, classified by the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Internal(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } => Self::Config(e.to_string()),
            CoreError::Shape(_) | CoreError::Contract(_) => Self::Internal(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

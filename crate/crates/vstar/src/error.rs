use thiserror::Error;

/// Errors surfaced by the decoding, training and evaluation machinery.
#[derive(Debug, Error)]
pub enum VstarError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty prefix bucket: {0}")]
    EmptyBucket(String),

    #[error("degenerate importance ratio: {0}")]
    DegenerateRatio(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl VstarError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            VstarError::Config(_) | VstarError::InvalidArgument(_) => 2,
            _ => 3,
        }
    }
}

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or parameter.
    #[error("run diverged: {0}")]
    Divergence(String),

    /// Inputs that do not fit together (e.g. prompt groups missing between manifests).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Core(#[from] msdm_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(msdm_core::Error::Config(_)) => 2,
            Self::Divergence(_) | Self::Core(msdm_core::Error::Numeric(_)) => 3,
            _ => 1,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid rating: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("corrupt study data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] msdm_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

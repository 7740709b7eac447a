use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("length error: sequence of {len} exceeds limit {max}")]
    Length { len: usize, max: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("constraint error: {0}")]
    Constraint(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Staged { stage: &'static str, source: Box<Error> },
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Training(_) => 3,
            Error::Constraint(_) => 4,
            Error::Staged { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Tags the error with the pipeline stage that raised it.
    pub fn at(self, stage: &'static str) -> Error {
        match self {
            Error::Staged { .. } => self,
            other => Error::Staged { stage, source: Box::new(other) },
        }
    }
}

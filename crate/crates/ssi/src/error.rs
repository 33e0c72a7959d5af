use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty-dataset: no sequences survive filtering")]
    EmptyDataset,

    #[error("insufficient items: {0}")]
    InsufficientItems(String),

    #[error("checkpoint/config incompatibility: {0}")]
    Compatibility(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage, 2 data error, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged(_) | Error::Numeric(_) => 3,
            Error::Config(_) | Error::MissingArtifact(_) => 1,
            _ => 2,
        }
    }
}

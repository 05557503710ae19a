use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("infeasible assignment: {rows} rows cannot be matched into {cols} columns")]
    Infeasible { rows: usize, cols: usize },

    #[error("registration error: {0}")]
    Registration(String),

    #[error("{0}")]
    Load(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error at query {query}: {message}")]
    Numeric { query: usize, message: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("unknown category: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    StaleCache(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Registration(_) | Error::Lookup(_) => 2,
            Error::Numeric { .. } | Error::Training(_) | Error::Domain(_) => 3,
            _ => 1,
        }
    }
}

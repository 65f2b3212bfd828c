use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("embedding store: {msg} (byte offset {offset})")]
    Store { offset: u64, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Process exit codes used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Shape(_)
            | Error::Io { .. }
            | Error::Manifest { .. }
            | Error::Store { .. }
            | Error::Checkpoint(_)
            | Error::Data(_) => ErrorClass::Data,
        }
    }
}

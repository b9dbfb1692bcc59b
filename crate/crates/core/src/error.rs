use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("refusing to overwrite existing artifact {0}")]
    AlreadyExists(PathBuf),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    /// Non-finite loss or gradient. `trace` holds the loss values seen
    /// before the failure.
    #[error("{what} diverged at step {step}")]
    Diverged { what: String, step: usize, trace: Vec<f64> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Prerequisite(_) => 3,
            Error::Diverged { .. } => 4,
            _ => 1,
        }
    }
}

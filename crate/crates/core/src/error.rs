use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed caller input (token out of range, bad index, empty data).
    #[error("input error: {0}")]
    Input(String),
    /// A configuration value is out of its valid range.
    #[error("config error: {0}")]
    Config(String),
    /// Exhaustive list of configuration problems found before any work ran.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    /// Required stored state is missing (e.g. log-probabilities not recorded).
    #[error("state error: {0}")]
    State(String),
    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An internal invariant was violated. Always a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),
    /// Violated operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Prompt queue and unfinished pool are both empty.
    #[error("end of data: no unfinished trajectories and no pending prompts")]
    EndOfData,
    /// Every group was removed before the loss; the update should be skipped.
    #[error("nothing to train: retained batch is empty")]
    NothingToTrain,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation/config/input problems, 2 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Validation(_) | Error::Toml(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] hyperagent_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error("plot error for {path}: {message}")]
    Plot { path: PathBuf, message: String },

    /// Some runs failed; completed ones are listed in the manifest.
    #[error("{failed} run(s) failed, first: {first}")]
    Runs { failed: usize, first: String },

    #[error("certification failed: {0} check(s) did not pass")]
    Certification(usize),
}

impl RunnerError {
    /// Process exit code: 1 run failure, 2 config error, 3 data-format error.
    pub fn exit_code(&self) -> i32 {
        use hyperagent_core::Error as E;
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Core(E::Parameter(_)) => 2,
            RunnerError::Core(E::Format { .. } | E::Data(_)) => 3,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| RunnerError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |source| RunnerError::Csv { path, source }
    }
}

pub type Result<T, E = RunnerError> = std::result::Result<T, E>;

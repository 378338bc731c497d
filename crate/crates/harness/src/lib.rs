//! Command-line driver, evaluation reports and the adjudication review
//! service built on `oncex_core`.

pub mod eval;
pub mod run;
pub mod server;
pub mod store;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{0}")]
    Run(String),
}

impl HarnessError {
    /// Process exit status: 2 for unusable inputs, 1 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingInput(_) => 2,
            HarnessError::Io { .. } | HarnessError::Run(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |e| HarnessError::Io {
        path,
        reason: e.to_string(),
    }
}

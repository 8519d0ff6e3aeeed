use std::path::{Path, PathBuf};
use thiserror::Error;

use pinnx_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExpError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Config(_) | ExpError::Io { .. } => 1,
            ExpError::Numerical(_) => 2,
            ExpError::Invariant(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExpError::Io { path: path.to_path_buf(), source }
    }
}

impl From<CoreError> for ExpError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidActivation(_) | CoreError::InvalidConfig(_) | CoreError::EmptyCollocation | CoreError::Format(_) => {
                ExpError::Config(msg)
            }
            CoreError::NonFiniteLayer { .. }
            | CoreError::NonFinite(_)
            | CoreError::Diverged { .. }
            | CoreError::Integrator { .. }
            | CoreError::ZeroDenominator(_) => ExpError::Numerical(msg),
            CoreError::Contract(_) => ExpError::Invariant(msg),
            CoreError::Io(source) => ExpError::Io { path: PathBuf::new(), source },
        }
    }
}

pub type Result<T> = std::result::Result<T, ExpError>;

/// Attaches a path to I/O errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| ExpError::io(path, e))
    }
}

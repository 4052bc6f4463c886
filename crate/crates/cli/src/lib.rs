//! Experiment harness for the equilibrium flow estimator: the `deqflow`
//! binary's commands as library functions, plus config, logging, and
//! optimizer plumbing.

pub mod commands;
pub mod config;
pub mod data;
pub mod logs;
pub mod optim;
pub mod stats;
pub mod train;

/// Harness error split by exit code: config problems exit 2, numerical
/// aborts exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<deqflow_core::CoreError> for CliError {
    fn from(e: deqflow_core::CoreError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

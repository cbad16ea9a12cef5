//! Command-line front end: scenario loading, plan and trace files, plots,
//! and the error-propagation report.

pub mod commands;
pub mod io;
pub mod scenario;
pub mod svg;
pub mod validate;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION_FAILED: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const NOT_CONVERGED: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario: {0}")]
    Schema(String),

    #[error("{0}")]
    Io(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Core(#[from] tlqg_core::Error),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use tlqg_core::Error as E;
        match self {
            CliError::Schema(_) | CliError::Io(_) | CliError::Parse(_) => exit::INPUT,
            CliError::Validation(_) => exit::VALIDATION_FAILED,
            CliError::NotConverged(_) => exit::NOT_CONVERGED,
            CliError::Core(e) => match e {
                E::Config(_) | E::Dimension { .. } | E::Input(_) | E::Index { .. } => exit::INPUT,
                // Numerical trouble surfaces while planning or executing.
                _ => exit::NOT_CONVERGED,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Fixed-format float for output files: 17 significant digits, period
/// decimal separator, independent of locale.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

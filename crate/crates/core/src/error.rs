use thiserror::Error;

/// Errors raised by the planning pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("singular point: {0}")]
    Singular(String),

    #[error("numerical error at step {step:?}: {what} (condition estimate {condition:e})")]
    Numerical {
        what: String,
        step: Option<usize>,
        condition: f64,
    },

    #[error("rollout produced a non-finite state at index {index}")]
    Rollout { index: usize },

    #[error("gradient probe for coordinate {coordinate} produced a non-finite cost")]
    Gradient { coordinate: usize },

    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },

    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Attaches a time index to numerical errors that do not carry one yet.
    pub(crate) fn at_step(self, t: usize) -> Self {
        match self {
            Error::Numerical {
                what,
                step: None,
                condition,
            } => Error::Numerical {
                what,
                step: Some(t),
                condition,
            },
            other => other,
        }
    }
}

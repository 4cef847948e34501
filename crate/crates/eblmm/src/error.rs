//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by model validation, fitting and prediction.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector does not have the expected dimension.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A grouping factor declares a level that no observation uses.
    #[error("empty level {level} in random effect {effect}")]
    EmptyLevel { effect: usize, level: usize },

    /// An input contains NaN or infinity.
    #[error("non-finite entries in {what}")]
    NonFinite { what: String },

    /// A matrix required to be symmetric positive definite is not.
    #[error("{what} is not positive definite (smallest pivot {pivot:e})")]
    NotPositiveDefinite { what: String, pivot: f64 },

    /// A linear system could not be solved.
    #[error("singular system in {what}: {hint}")]
    SingularSystem { what: String, hint: String },

    /// A parameter or configuration value is out of range.
    #[error("invalid {what}: {message}")]
    InvalidValue { what: String, message: String },

    /// The requested operation is not supported for these inputs.
    #[error("unsupported: {message}")]
    Unsupported { message: String },

    /// Every start of a multistart optimization failed.
    #[error("hyperparameter optimization failed on all starts: {}", diagnostics.join("; "))]
    OptimizationFailed { diagnostics: Vec<String> },

    /// Level labels could not be mapped unambiguously.
    #[error("level mapping error: {message}")]
    LevelMapping { message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }

    pub(crate) fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidValue {
            what: what.into(),
            message: message.into(),
        }
    }

    /// True when the error reflects bad input rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::EmptyLevel { .. }
                | Error::NonFinite { .. }
                | Error::InvalidValue { .. }
                | Error::Unsupported { .. }
                | Error::LevelMapping { .. }
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::Path;

use thiserror::Error;
use vpmap_core::VpError;

/// Process exit status of each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Numerical = 4,
    Verification = 5,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Data, message)
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Numerical, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::data(format!("{}: {err}", path.display()))
    }

    pub fn with_context(mut self, context: impl std::fmt::Display) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }
}

/// Errors raised while building the model from a validated config and
/// while sampling.
impl From<VpError> for CliError {
    fn from(e: VpError) -> Self {
        let kind = match &e {
            VpError::Parse { .. }
            | VpError::Validation(_)
            | VpError::Size(_)
            | VpError::DegenerateStructure(_)
            | VpError::ConstraintViolation { .. } => ExitKind::Data,
            VpError::Elicitation(_) => ExitKind::Config,
            _ => ExitKind::Numerical,
        };
        Self::new(kind, e.to_string())
    }
}

/// Errors in config values are config errors whatever their core kind.
pub fn as_config(e: VpError) -> CliError {
    CliError::config(e.to_string())
}

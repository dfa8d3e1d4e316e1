use thiserror::Error;

/// Errors raised by model construction, prior elicitation and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VpError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("degenerate structure: {0}")]
    DegenerateStructure(String),

    #[error("constraint violation: null-space component {residual:e} exceeds tolerance {tolerance:e}")]
    ConstraintViolation { residual: f64, tolerance: f64 },

    #[error("prior elicitation error: {0}")]
    Elicitation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("support mismatch: {0}")]
    Support(String),

    #[error("mixing parameter at boundary: {0}")]
    Endpoint(String),

    #[error("initialization error: {0}")]
    Initialization(String),
}

pub type Result<T> = std::result::Result<T, VpError>;

use thiserror::Error;

/// Errors raised by the engine. Each variant maps onto a distinct CLI exit code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EgError {
    #[error("quadrature failed to converge: {0}")]
    QuadratureFailure(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("unsupported case: {0}")]
    UnsupportedCase(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("non-integrable singularity: {0}")]
    NonIntegrableSingularity(String),

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("input is not linear: {0}")]
    NonLinearInput(String),

    #[error("distribution is not primitive: {0}")]
    NotPrimitive(String),

    #[error("overlapping divergence: {0}")]
    OverlappingDivergence(String),

    #[error("ill-conditioned scaling fit: {0}")]
    IllConditionedFit(String),

    #[error("{0}")]
    Parse(#[from] ParseError),
}

/// A configuration or expression parse failure with a 1-based location.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EgError>;

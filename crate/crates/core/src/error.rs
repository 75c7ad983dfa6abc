use thiserror::Error;

pub type Result<T, E = BenelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BenelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was asked to work outside the set where it is defined,
    /// e.g. the gradient of an infeasible empirical likelihood.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid sampler state: {0}")]
    InvalidState(String),

    #[error("insufficient sample: need at least {needed} draws, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("degenerate expectation: {0}")]
    DegenerateExpectation(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("missing values in rows {rows:?}")]
    MissingValues { rows: Vec<usize> },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenelError {
    /// Short machine-parsable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            BenelError::InvalidInput(_) => "invalid_input",
            BenelError::Domain(_) => "domain",
            BenelError::InvalidState(_) => "invalid_state",
            BenelError::InsufficientSample { .. } => "insufficient_sample",
            BenelError::DegenerateExpectation(_) => "degenerate_expectation",
            BenelError::EmptyData(_) => "empty_data",
            BenelError::MissingValues { .. } => "missing_values",
            BenelError::Parse { .. } => "parse",
            BenelError::Io(_) => "io",
            BenelError::Csv(_) => "parse",
        }
    }
}

use benel::BenelError;
use thiserror::Error;

/// Every failure surfaces as one line `error[<category>]: <message>` and a
/// category-specific exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Io(String),

    #[error("{0}")]
    Schema(String),

    #[error(transparent)]
    Core(#[from] BenelError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Schema(_) => "schema",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" | "invalid_input" => 2,
            "io" => 3,
            "parse" | "missing_values" | "empty_data" | "schema" => 4,
            _ => 5,
        }
    }

    /// The error line, with any embedded newlines flattened.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.category(), msg)
    }
}

pub fn io_error(what: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{what} {}: {e}", path.display()))
}

use nenkf::FilterError;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, input files or arguments (exit code 2).
    #[error("validation error: {0}")]
    Validation(String),
    /// A filter or chain failed numerically (exit code 3).
    #[error("numerical failure: {0}")]
    Numerical(FilterError),
    /// A reference chain that never moved (exit code 3).
    #[error("degenerate reference chain: {0}")]
    DegenerateReference(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) | Self::Io(_) => 2,
            Self::Numerical(_) | Self::DegenerateReference(_) => 3,
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        if e.is_numerical() {
            Self::Numerical(e)
        } else {
            Self::Validation(e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Validation(format!("CSV: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Validation(format!("JSON: {e}"))
    }
}

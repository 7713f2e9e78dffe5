use ngram_core::Error as CoreError;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or inputs (exit 2).
    #[error("{0}")]
    Invalid(String),
    /// Training produced a non-finite loss (exit 3).
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    /// Gradient check above threshold (exit 1).
    #[error("gradient check failed: relative error {error:e} at {parameter}[{index}] exceeds {threshold:e}")]
    GradCheckFailed {
        parameter: String,
        index: usize,
        error: f64,
        threshold: f64,
    },
    /// Anything else (exit 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::GradCheckFailed { .. } | CliError::Runtime(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { step, loss } => CliError::Divergence { step, loss },
            CoreError::Config(_)
            | CoreError::Input(_)
            | CoreError::InvalidOrder(_)
            | CoreError::Format(_)
            | CoreError::Dimension { .. } => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

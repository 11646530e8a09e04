//! CLI error wrapper and the exit-code contract: 0 success, 2 validation
//! problems (bad input data or configuration), 3 numerical failures.

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] leaveout_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column '{0}' in header")]
    MissingColumn(String),

    #[error("duplicate observation for worker {worker} in period {period} (lines {first} and {second})")]
    DuplicateRow { worker: String, period: i64, first: usize, second: usize },

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Config(_)
            | CliError::Parse { .. }
            | CliError::MissingColumn(_)
            | CliError::DuplicateRow { .. } => 2,
            CliError::Io(_) | CliError::Csv(_) => 1,
        }
    }
}

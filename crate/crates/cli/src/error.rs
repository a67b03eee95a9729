use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing artifact {path}; run `consult {producer}` first")]
    Missing {
        path: String,
        producer: &'static str,
    },
    #[error("{0}")]
    Core(#[from] consult_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// The tuner fell back to the best recall point; outputs were written.
    #[error("life-threat recall constraint {constraint} not met on dev (best {achieved:.4}); fallback thresholds written")]
    ConstraintUnmet { constraint: f64, achieved: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_config() => 2,
            CliError::ConstraintUnmet { .. } => 4,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

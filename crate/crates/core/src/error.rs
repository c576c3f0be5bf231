use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is rank deficient; aliased columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("inner-mode Newton iteration failed for center `{center}`")]
    InnerMode { center: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("estimator failure fraction {fraction:.4} exceeds limit {limit:.4}")]
    FailureFraction { fraction: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error code, also used as the process exit status by the CLI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::FailureFraction { .. } => 4,
            _ => 3,
        }
    }
}

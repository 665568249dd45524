use thiserror::Error;

pub type Result<T, E = LearnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Core(#[from] parkour_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// A sensor reading older than the allowed staleness.
    #[error("sensor reading is {0:.3} s old")]
    Stale(f64),
    /// Loss or parameters went non-finite during an update.
    #[error("non-finite training state: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LearnError {
    /// True for errors caused by bad user input rather than bad files.
    pub fn is_config(&self) -> bool {
        matches!(self, LearnError::Config(_) | LearnError::Json(_) | LearnError::Core(parkour_core::Error::Config(_)))
    }
}

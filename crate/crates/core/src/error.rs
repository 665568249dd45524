use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters supplied by a caller or a config file.
    #[error("configuration error: {0}")]
    Config(String),
    /// A runtime precondition was broken (NaN input, time going backwards, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Heading direction requested at (or within 1e-6 of) the waypoint itself.
    #[error("degenerate waypoint direction: robot is {0:.3e} m from the waypoint")]
    DegenerateDirection(f64),
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

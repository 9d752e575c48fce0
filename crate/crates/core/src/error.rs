use thiserror::Error;

/// Errors raised across the simulator, training loops and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arena geometry or spawn layout.
    #[error("arena construction error: {0}")]
    Construction(String),
    /// Operation called in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed numeric input (e.g. non-finite observation).
    #[error("input error: {0}")]
    Input(String),
    /// Training produced non-finite values or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),
    /// Episode suite could not be generated.
    #[error("generation error for episode {episode_id}: {reason}")]
    Generation { episode_id: u32, reason: String },
    /// Checkpoint or dataset could not be loaded.
    #[error("load error: {0}")]
    Load(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

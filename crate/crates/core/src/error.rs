use std::io;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum AmiError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("index {index} outside domain of size {k}")]
    Domain { index: u32, k: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is rank deficient")]
    RankDeficient,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AmiError {
    /// True for failures caused by the user's configuration rather than by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, AmiError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, AmiError>;

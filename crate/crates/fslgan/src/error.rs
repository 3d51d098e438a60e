use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("numeric failure in {0}: non-finite value produced")]
    NumericFailure(String),

    #[error("domain error in {context}: value {value} outside {domain}")]
    Domain {
        context: String,
        value: f64,
        domain: String,
    },

    #[error("backward called before forward on {0}")]
    BackwardBeforeForward(&'static str),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("no eligible clients: {0}")]
    NoEligibleClients(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },

    #[error("truncated IDX file: {0}")]
    Truncated(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

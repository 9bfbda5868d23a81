use thiserror::Error;

/// Errors produced by the extraction engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient resolution: {key_points} key points cannot fit into {samples} samples")]
    InsufficientResolution { key_points: usize, samples: usize },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{key_points} ground-truth key points exceed {predicted} predicted points")]
    TooManyKeyPoints { key_points: usize, predicted: usize },

    #[error("requested {requested} coarse queries but only {available} tokens exist")]
    TooManyQueries { requested: usize, available: usize },

    #[error("self-intersecting polygon")]
    SelfIntersecting,

    #[error("degenerate polygon")]
    DegeneratePolygon,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("annotation {id}: unknown structure \"{structure}\"")]
    UnknownStructure { id: u64, structure: String },

    #[error("annotation {id}: coordinate out of range")]
    CoordinateOutOfRange { id: u64 },

    #[error("annotation {id}: {reason}")]
    InvalidAnnotation { id: u64, reason: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("schema error in track `{track}`, field `{field}`: {message}")]
    Schema {
        track: String,
        field: String,
        message: String,
    },

    #[error("track `{track}` has {count} captions, expected 3")]
    CaptionCount { track: String, count: usize },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("feature vector has width {got}, expected {expected}")]
    FeatureWidth { got: usize, expected: usize },

    #[error("cosine metric is undefined for a zero vector")]
    ZeroVector,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("need at least {needed} tracks, got {got}")]
    TooFewTracks { needed: usize, got: usize },

    #[error("query `{0}` has no ground-truth candidate")]
    MissingTruth(String),

    #[error("caption is empty")]
    EmptyCaption,

    #[error("batch length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite loss (batch seed {batch_seed})")]
    NonFiniteLoss { batch_seed: u64 },

    #[error("box cannot be normalized to the image: {0}")]
    BoxOutOfImage(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("frame indices must be non-negative and strictly increasing")]
    NonMonotoneIndices,

    #[error("every frame is masked")]
    AllMasked,

    #[error("a real frame has no real object slot")]
    AllMaskedFrame,

    #[error("anchor {0} has no negative candidate")]
    NoCandidates(usize),

    #[error("embedding store is empty")]
    EmptyStore,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Data or validation failures, as opposed to numeric or I/O ones.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}

//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({px}, {py}) outside image {width}x{height}")]
    PixelOutOfBounds {
        px: f64,
        py: f64,
        width: u32,
        height: u32,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("bounding box has no volume: min {min:?}, max {max:?}")]
    DegenerateBbox { min: [f64; 3], max: [f64; 3] },

    #[error("cannot build a grid from an empty point set")]
    EmptyPointSet,

    #[error("cell {0:?} is not occupied")]
    UnknownCell([i32; 3]),

    #[error("point {0:?} lies outside every occupied voxel")]
    PointOutsideGrid([f64; 3]),

    #[error("local coordinate {0:?} outside the unit cube")]
    LocalOutsideCell([f64; 3]),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("ray tape truncated by early termination; train with eps = 0")]
    TruncatedTape,

    #[error("dataset has no voxels to sample against")]
    NoVoxels,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("all voxels pruned at step {step}; nothing left to train")]
    AllVoxelsPruned { step: usize },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint checksum mismatch (file damaged or truncated)")]
    ChecksumMismatch,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("dataset error at {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("script line {line}: {detail}")]
    Script { line: usize, detail: String },

    #[error("bad config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

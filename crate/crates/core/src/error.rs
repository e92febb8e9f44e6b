//! Crate-wide error types.

use thiserror::Error;

/// Errors produced by mask algebra and feature-map operations.
#[derive(Debug, Error)]
pub enum InvalidInput {
    #[error("empty mask list")]
    EmptyMaskList,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("value out of range at ({row}, {col}): {value}")]
    OutOfRange { row: usize, col: usize, value: f32 },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("{0}")]
    Other(String),
}

/// Errors produced by the dataset reader/writer, phantom generator and fold
/// splitter.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("dimension mismatch for sample {sample_id}: manifest says {expected:?}, file has {got:?}")]
    DimensionMismatch {
        sample_id: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("mask value outside {{0,1}} in {path} at byte {offset}: {value}")]
    BadMaskValue {
        path: String,
        offset: usize,
        value: u8,
    },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("stratum {stratum} has {count} samples, need at least 5 for a five-fold split")]
    StratumTooSmall { stratum: String, count: usize },
    #[error("fold split violates stratification tolerance: {0}")]
    BadSplit(String),
}

/// Errors from model construction and inference.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("channel count {channels} not divisible by 16")]
    ChannelsNotDivisible { channels: usize },
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input size {height}x{width} not divisible by 32")]
    BadInputSize { height: usize, width: usize },
    #[error("non-finite activation detected in {stage}")]
    NonFiniteActivation { stage: String },
    #[error("unknown layer tag: {0}")]
    UnknownLayerTag(String),
    #[error("{0}")]
    Other(String),
}

/// Errors from metric and density-curve computation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty region: no pixels selected for density estimation")]
    EmptyRegion,
    #[error("density curves have different grids")]
    GridMismatch,
}

/// Errors from the checkpoint reader/writer.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
}

/// Errors from the training engine.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("NaN loss at step {step}; term values: {dump}")]
    NanLoss { step: usize, dump: String },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Umbrella error for library consumers that do not care about the category.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    InvalidInput(#[from] InvalidInput),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

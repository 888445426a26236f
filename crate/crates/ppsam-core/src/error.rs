//! Error types, one enum per subsystem.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mask contains no foreground pixel")]
    EmptyMask,
    #[error("invalid box ({x_min},{y_min},{x_max},{y_max}): min must be strictly below max")]
    InvalidBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    #[error("rescaling collapsed the box to zero area ({x_min},{y_min},{x_max},{y_max})")]
    DegenerateBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {expected_width}x{expected_height} vs {got_width}x{got_height}")]
    ShapeMismatch {
        expected_width: u32,
        expected_height: u32,
        got_width: u32,
        got_height: u32,
    },
    #[error("cannot aggregate an empty list of runs")]
    EmptyRuns,
    #[error("probability {value} at index {index} outside [0, 1]")]
    InvalidProbability { value: f64, index: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unmatched dataset files: {0:?}")]
    MissingPair(Vec<String>),
    #[error("dataset `{0}` contains no samples")]
    EmptyDataset(String),
    #[error("split file references unknown sample ids: {0:?}")]
    UnknownId(Vec<String>),
    #[error("sample ids listed on both sides of the split: {0:?}")]
    OverlappingSplit(Vec<String>),
    #[error("manifest ids missing from the split file: {0:?}")]
    IncompleteSplit(Vec<String>),
    #[error("requested {requested}-shot sample from a manifest of {available} records")]
    InsufficientData { requested: usize, available: usize },
    #[error("unsupported shot count {0}: expected 1, 5, 10, 20, 50, 100 or full")]
    InvalidShotCount(usize),
    #[error("failed to read `{path}`: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("io error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum SegmenterError {
    #[error("degenerate prompt box")]
    InvalidPrompt,
    #[error("backend `{backend}` does not support {operation}")]
    UnsupportedBackend {
        backend: &'static str,
        operation: &'static str,
    },
    #[error("foundation backend requires a checkpoint path")]
    MissingCheckpoint,
    #[error("invalid segmenter spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint at `{path}` is not loadable: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("foundation runner protocol error: {0}")]
    Protocol(String),
    #[error("prompt does not fit the model input resolution {resolution}")]
    PromptOutOfBounds { resolution: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("freeze policy leaves no trainable parameters")]
    AllFrozen,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("non-finite loss at epoch {epoch}, step {step}: training diverged")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid run config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sweep(#[from] Box<SweepError>),
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("test set `{0}` is empty")]
    EmptyTestSet(String),
    #[error("unknown experiment kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training failed for run seed {seed}: {source}")]
    Train {
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("io error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

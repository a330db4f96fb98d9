use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },

    #[error("spectrum `{source_id}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidSpectrum {
        source_id: String,
        line: Option<u64>,
        message: String,
    },

    #[error("requested grid [{grid_min}, {grid_max}] does not overlap measured range [{measured_min}, {measured_max}] of `{source_id}`")]
    NoOverlap {
        source_id: String,
        grid_min: f64,
        grid_max: f64,
        measured_min: f64,
        measured_max: f64,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch norm `{0}` evaluated before any training-mode pass")]
    UninitializedRunningStats(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, {positives} positive / {negatives} negative pairs)")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        positives: usize,
        negatives: usize,
    },

    #[error("ensemble member with seed {seed} failed: {source}")]
    Member {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("split {seed} failed: {source}")]
    Split {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("reference library features are stale (library built for {library}, ensemble is {ensemble})")]
    StaleLibrary { library: String, ensemble: String },

    #[error("class `{0}` is not present in the reference library")]
    UnknownClass(String),

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {0} prediction sets vs {1} truths")]
    LengthMismatch(usize, usize),

    #[error("cosine similarity is undefined for a zero-norm query")]
    ZeroNormQuery,

    #[error("conformal calibration refused: validation data is augmented and not exchangeable with test data")]
    AugmentedCalibration,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use crate::bmac::SpoilAttribute;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // BMAC scoring
    #[error("attribute {0} has no label")]
    MissingAttribute(SpoilAttribute),
    #[error("category {0} is outside 1..=4")]
    InvalidCategory(i64),
    #[error("attribute weight for {attribute} must be positive and finite, got {weight}")]
    InvalidWeight { attribute: SpoilAttribute, weight: f64 },

    // dataset
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("unknown label `{value}` for target `{target}`")]
    UnknownLabel { target: String, value: String },
    #[error("unknown classification target `{0}`")]
    UnknownTarget(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot decode image {}: {message}", .path.display())]
    Decode { path: PathBuf, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("class `{class}` has {count} samples, need at least {needed}")]
    InsufficientClassSamples { class: String, count: usize, needed: usize },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("fold count {0} must be at least 2")]
    InvalidFoldCount(usize),

    // backbones
    #[error("pretrained weights for {arch} unavailable: {reason}")]
    WeightsUnavailable { arch: String, reason: String },
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("a classifier needs at least 2 classes, got {0}")]
    InvalidClassCount(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    // CNN training
    #[error("non-finite loss at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("fold has no {0} samples")]
    EmptyFold(&'static str),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    // classical heads
    #[error("feature matrix has zero variance in every dimension")]
    DegenerateFeatures,
    #[error("{samples} samples cannot train a {classes}-class model")]
    InsufficientSamples { samples: usize, classes: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training labels contain a single class")]
    SingleClassInput,
    #[error("{have} descriptors cannot seed {k} clusters")]
    TooFewDescriptors { have: usize, k: usize },
    #[error("head was trained on extractor {expected}, features come from {got}")]
    StaleHead { expected: String, got: String },

    // evaluation
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class `{0}` has no true samples")]
    AbsentClass(String),
    #[error("aggregation needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("t-test needs at least 2 values per sample")]
    SampleTooSmall,

    // experiments
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("bundles cover several targets: {0:?}")]
    MixedTargets(Vec<String>),
    #[error("comparison needs at least 2 runs, found {0}")]
    TooFewRuns(usize),
    #[error("no result bundles under {}", .0.display())]
    NoBundles(PathBuf),
    #[error("plot rendering failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Other,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config { .. } | UnknownArchitecture(_) | InvalidHyperparams(_) | InvalidRatio(_)
            | InvalidFoldCount(_) | InvalidClassCount(_) | InvalidWeight { .. } => ErrorKind::Config,
            DuplicateId(_) | UnknownLabel { .. } | UnknownTarget(_) | MissingFile(_) | Decode { .. }
            | Manifest(_) | InsufficientClassSamples { .. } | MissingAttribute(_)
            | InvalidCategory(_) | Csv(_) | MixedTargets(_) | TooFewRuns(_) | NoBundles(_) => {
                ErrorKind::Data
            }
            DivergenceDetected { .. } | EmptyFold(_) | DegenerateFeatures
            | InsufficientSamples { .. } | SingleClassInput | TooFewDescriptors { .. }
            | WeightsUnavailable { .. } | Candle(_) | ShapeMismatch { .. }
            | DimensionMismatch { .. } | StaleHead { .. } => ErrorKind::Training,
            _ => ErrorKind::Other,
        }
    }
}

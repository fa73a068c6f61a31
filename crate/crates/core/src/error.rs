use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants split into two families: data validation failures (bad inputs,
/// violated invariants) and I/O failures. [`Error::is_io`] tells them apart so
/// callers can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate sample_id `{0}`")]
    DuplicateSample(String),

    #[error("sample `{sample}` has parent_id `{parent}` which is not an original record")]
    DanglingParent { sample: String, parent: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("class `{0}` has no records")]
    EmptyClass(String),

    #[error(
        "split `{split}`: majority count {majority} exceeds three times the minority count {minority}; flips cannot balance it"
    )]
    InsufficientFlips {
        split: String,
        minority: usize,
        majority: usize,
    },

    #[error("flip balancing needs exactly two classes, found {0}")]
    NotBinary(usize),

    #[error("invalid augmentation plan: {0}")]
    InvalidPlan(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("missing source file {0}")]
    MissingSource(PathBuf),

    #[error("failed to write {failed} of {total} outputs (first: {first}); {} written", .written.len())]
    PartialWrite {
        failed: usize,
        total: usize,
        first: String,
        written: Vec<PathBuf>,
    },

    #[error("sample `{sample}`: scores sum to {sum}, expected 1 within 1e-6")]
    RowSum { sample: String, sum: f64 },

    #[error("sample `{sample}`: invalid score {value}")]
    BadScore { sample: String, value: f64 },

    #[error("unknown sample_id `{0}`")]
    UnknownSample(String),

    #[error("missing prediction for sample `{0}`")]
    MissingSample(String),

    #[error("class vocabulary mismatch: expected {expected:?}, found {found:?}")]
    ClassMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("prediction tables disagree: {0}")]
    Misaligned(String),

    #[error("label sequences differ in length ({predicted} predicted vs {truth} truth)")]
    LengthMismatch { predicted: usize, truth: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("class `{0}` has no relevant samples")]
    NoRelevant(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid accuracy {0}: must lie strictly between 0 and 1")]
    InvalidAccuracy(f64),

    #[error("invalid priors: {0}")]
    InvalidPriors(String),

    #[error("invalid metric value {0}: must be positive")]
    NonPositiveMetric(f64),

    #[error("keep_k = {keep} out of range 1..={available}")]
    KeepOutOfRange { keep: usize, available: usize },

    #[error("invalid grid step `{0}`: must be 1/K for a positive integer K")]
    InvalidStep(String),

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("invalid report: {0}")]
    InvalidReport(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
}

impl Error {
    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Encode { .. } | Error::PartialWrite { .. } | Error::MissingSource(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

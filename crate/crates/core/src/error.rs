//! Crate-wide error type. Variants carry enough context to act on the
//! failure without re-running: shape errors name both shapes, stream errors
//! name the offending counts, pretraining failure carries its learning curve.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value produced (first at index {index})")]
    NonFinite { op: &'static str, index: usize },

    #[error("parameter store: no entry named {0:?}")]
    UnknownParameter(String),

    #[error("parameter store: entry {0:?} already present")]
    DuplicateParameter(String),

    #[error("flat vector length {got} does not match trainable length {expected}")]
    FlatLengthMismatch { got: usize, expected: usize },

    #[error("cross entropy: label {label} is masked out")]
    MaskedLabel { label: usize },

    #[error("cross entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mask of width {width} has no set bit")]
    EmptyMask { width: usize },

    #[error("mask width {got} does not match class count {expected}")]
    MaskWidthMismatch { got: usize, expected: usize },

    #[error("session mask updated out of order: step from session {got} after session {current}")]
    SessionOrder { current: usize, got: usize },

    #[error("optimizer rejected a non-finite gradient (first at coordinate {index})")]
    NonFiniteGradient { index: usize },

    #[error("perturbation requires disjoint label sets, but {overlap} labels appear in both batches")]
    LabelOverlap { overlap: usize },

    #[error("stream: cannot split {classes} classes into {sessions} non-empty sessions")]
    InfeasiblePartition { classes: usize, sessions: usize },

    #[error("stream: session {session} still empty after {attempts} relocation attempts")]
    EmptySession { session: usize, attempts: usize },

    #[error("stream: {0}")]
    InvalidStreamConfig(String),

    #[error("dataset: {0}")]
    InvalidDataset(String),

    #[error("synthetic data: could not place {classes} centroids with margin {margin} in {attempts} attempts")]
    MarginInfeasible {
        classes: usize,
        margin: f64,
        attempts: usize,
    },

    #[error("pretraining failed sanity gate: accuracy {accuracy:.4} < {required:.4}; per-epoch curve {curve:?}")]
    PretrainingFailure {
        accuracy: f64,
        required: f64,
        curve: Vec<f64>,
    },

    #[error("training aborted at step {step}: non-finite loss")]
    TrainingDiverged { step: usize },

    #[error("prompt checkpoint required for this configuration but none was provided")]
    MissingCheckpoint,

    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },

    #[error("checkpoint provenance {found:?} does not match configured mode {expected:?}")]
    ProvenanceMismatch { found: String, expected: String },

    #[error("config line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },

    #[error("config: {0}")]
    InvalidConfig(String),

    #[error("evaluation matrix: {0}")]
    InvalidMatrix(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an IO error with the path or action that produced it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

/// Coarse error category, used by callers (e.g. the CLI) to map failures
/// to distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration or parameters.
    Config,
    /// Missing, malformed, or inconsistent data and files.
    Data,
    /// Failures inside a numeric computation.
    Compute,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value in tensor data")]
    NonFiniteValue,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range 1..={num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss during training")]
    NonFiniteLoss,
    #[error("trigger kind mismatch: expected {expected}")]
    TriggerKindMismatch { expected: &'static str },
    #[error("patch ({height}x{width} at {row},{col}) exceeds image bounds {image_height}x{image_width}")]
    PatchOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        image_height: usize,
        image_width: usize,
    },
    #[error("poison budget underflow: rate {rate} of {count} samples selects nothing")]
    PoisonBudgetUnderflow { rate: f64, count: usize },
    #[error("every test sample belongs to the target class {target}")]
    NoPoisonableSamples { target: usize },
    #[error("class {class} has {count} samples, at least {required} required")]
    TooFewClassSamples {
        class: usize,
        count: usize,
        required: usize,
    },
    #[error("no benign samples of target class {class} to form centroids")]
    NoBenignTargetSamples { class: usize },
    #[error("predicted class {class} has no calibration")]
    MissingCalibration { class: usize },
    #[error("layer range mismatch: {left:?} vs {right:?}")]
    LayerRangeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("similarity profile covers {len} layers, at least 2 required")]
    ProfileTooShort { len: usize },
    #[error("empty input list: {0}")]
    EmptyInput(&'static str),
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Which exit-code bucket this error belongs to.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidConfig(_) | TriggerKindMismatch { .. } | ProfileTooShort { .. } => {
                ErrorCategory::Config
            }
            ShapeMismatch { .. }
            | LengthMismatch { .. }
            | NonFiniteValue
            | EmptyDataset
            | LabelOutOfRange { .. }
            | InvalidNetwork(_)
            | PatchOutOfBounds { .. }
            | PoisonBudgetUnderflow { .. }
            | NoPoisonableSamples { .. }
            | TooFewClassSamples { .. }
            | NoBenignTargetSamples { .. }
            | EmptyInput(_)
            | MalformedFile { .. }
            | Io(_)
            | Json(_) => ErrorCategory::Data,
            NonFiniteLoss | MissingCalibration { .. } | LayerRangeMismatch { .. } => {
                ErrorCategory::Compute
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

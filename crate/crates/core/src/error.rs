use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image `{0}` has no mask with the same name")]
    MissingMask(String),
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient data: requested {requested}, available {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("i/o failure at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model is conditional but no condition mask was given")]
    MissingCondition,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss { step: u64, last_finite: Option<f64> },
    #[error("embedding dimension {0} must be even and at least 2")]
    InvalidDim(usize),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("size {size} is not divisible by {factor}")]
    IndivisibleSize { size: usize, factor: usize },
    #[error("empty set")]
    EmptySet,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NonPsdInput(f64),
    #[error("empty list")]
    EmptyList,
    #[error("wrong model kind: expected {expected}, found {found}")]
    WrongModelKind { expected: String, found: String },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("run directory {0} is locked by another stage")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// Stable machine-readable identifier, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingMask(_) => "missing_mask",
            Error::UnreadableFile { .. } => "unreadable_file",
            Error::EmptyDataset => "empty_dataset",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::IoFailure { .. } => "io_failure",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingCondition => "missing_condition",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::InvalidDim(_) => "invalid_dim",
            Error::InvalidArch(_) => "invalid_arch",
            Error::IndivisibleSize { .. } => "indivisible_size",
            Error::EmptySet => "empty_set",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::NonPsdInput(_) => "non_psd_input",
            Error::EmptyList => "empty_list",
            Error::WrongModelKind { .. } => "wrong_model_kind",
            Error::Malformed { .. } => "malformed",
            Error::Locked(_) => "locked",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

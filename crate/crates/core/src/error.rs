//! Crate-wide error type.
//!
//! Variants are deliberately specific: callers (the CLI in particular) map
//! them onto exit codes and user-facing categories, and several tests assert
//! that a *particular* failure is reported rather than a generic one.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("{0}: input is empty")]
    EmptyInput(String),

    #[error("non-finite value encountered in {block}")]
    NonFinite { block: String },

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("quantile level {requested} not available; levels are {available:?}")]
    LevelNotFound {
        requested: f64,
        available: Vec<f64>,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("unsupported chemistry {found:?} (known: LFP, NCA, NMC, LCO, NMC_LCO)")]
    UnsupportedChemistry { found: String },

    #[error("no discharge curve at cycle {cycle}; available cycles: {available:?}")]
    MissingCurve { cycle: u32, available: Vec<u32> },

    #[error("feature schema mismatch: model was built for schema {expected}, data uses {actual}")]
    SchemaMismatch { expected: u32, actual: u32 },

    #[error("not a model file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported model format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("model file is truncated ({detail})")]
    Truncated { detail: String },

    #[error("model file checksum mismatch: file is corrupted")]
    ChecksumMismatch,

    #[error("expert order in model file is not the canonical chemistry order: {detail}")]
    ExpertOrderMismatch { detail: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::feature_store::GroundTruthKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"FEATC01\\0\"")]
    BadMagic,

    #[error("truncated payload: header declares {expected} bytes of values, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("unsupported dtype code {0} (only 0 = f32 is supported)")]
    UnsupportedDtype(u32),

    #[error("manifest lists {actual} images but the container holds {expected}")]
    ManifestMismatch { expected: usize, actual: usize },

    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("invariant violated on `{field}`: {reason}")]
    InvariantViolation { field: &'static str, reason: String },

    #[error("sample count {count} out of range 1..={available}")]
    CountOutOfRange { count: usize, available: usize },

    #[error("channel index {index} out of range for {channels} channels")]
    IndexOutOfRange { index: usize, channels: usize },

    #[error("channel {0} is edited more than once")]
    DuplicateSource(usize),

    #[error("identity pair ({0}, {0}) is not a valid edit")]
    IdentityPair(usize),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("ground-truth depth must be positive (found {0})")]
    NonPositiveGroundTruth(f64),

    #[error("ground-truth kind mismatch: scorer expects {expected}, cache holds {found}")]
    KindMismatch {
        expected: GroundTruthKind,
        found: GroundTruthKind,
    },

    #[error("head expects {expected} channels, cache has {actual}")]
    WeightLengthMismatch { expected: usize, actual: usize },

    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("adapter exited unexpectedly: {0}")]
    AdapterCrashed(String),

    #[error("adapter did not reply within {0:?}")]
    Timeout(Duration),

    #[error("scoring {context} failed: {source}")]
    Scoring {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{count} candidates exceeds the brute-force limit of {limit}")]
    TooManyCandidates { count: usize, limit: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvariantViolation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn malformed(what: &'static str, reason: impl ToString) -> Self {
        Error::Malformed {
            what,
            reason: reason.to_string(),
        }
    }

    pub(crate) fn scoring(context: impl Into<String>, source: Error) -> Self {
        Error::Scoring {
            context: context.into(),
            source: Box::new(source),
        }
    }

    /// Strips any `Scoring` context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scoring { source, .. } => source.root(),
            other => other,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate surface {0:?} in vocabulary")]
    DuplicateSurface(String),

    #[error("{path}:{line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("embedding space {0:?} matched no vocabulary terms")]
    NoMatchedTerms(String),

    #[error("unknown surface {0:?}")]
    UnknownSurface(String),

    #[error("term {term:?} has no vector in space {space:?}")]
    MissingVector { term: String, space: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no positive pairs could be generated")]
    NoPositivePairs,

    #[error("training data must contain both labels")]
    SingleClass,

    #[error("non-finite feature value at example {row}, feature {col}")]
    NonFiniteFeature { row: usize, col: usize },

    #[error("expected {expected} features, got {found}")]
    FeatureLength { expected: usize, found: usize },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("unsupported model version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("SVM optimizer did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("vocabulary too small: need more than {needed} candidate terms, have {available}")]
    VocabularyTooSmall { needed: usize, available: usize },

    #[error("no entities scored below {threshold}; increase the scored pool")]
    NoNegativeCandidates { threshold: f64 },

    #[error("partition does not cover node {0}")]
    UncoveredNode(usize),

    #[error("no synonym pairs to average over")]
    NoPairs,

    #[error("degenerate variance: all paired differences are identical")]
    DegenerateVariance,

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Whether the error stems from bad inputs (files, config, formats) rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::DuplicateSurface(_)
                | Error::DimensionMismatch { .. }
                | Error::NoMatchedTerms(_)
                | Error::UnknownSurface(_)
                | Error::Config(_)
                | Error::Json { .. }
                | Error::CorruptModel(_)
                | Error::ModelVersion { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

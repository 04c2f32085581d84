use thiserror::Error;

use crate::merge::MixtureVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Evaluator,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("truncated header")]
    TruncatedHeader,
    #[error("header length {header_len} exceeds file size {file_len}")]
    HeaderTooLarge { header_len: u64, file_len: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unsupported dtype {dtype} for tensor {name} (only F32 is supported)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),
    #[error("overlapping offsets at tensor {0}")]
    OverlappingOffsets(String),
    #[error("gapped offsets at tensor {0}")]
    GappedOffsets(String),
    #[error("data region length {actual} does not match declared extent {declared}")]
    DataRegionMismatch { declared: usize, actual: usize },
    #[error("invalid tensor {name}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("tensor name mismatch: {0}")]
    NameMismatch(String),
    #[error("shape mismatch at {0}")]
    ShapeMismatch(String),
    #[error("model bank is empty")]
    EmptyBank,

    #[error("empty mixture")]
    EmptyMixture,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid mixture string {0:?}")]
    InvalidMixture(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("{what} {value} out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: String,
        min: String,
        max: String,
    },

    #[error("model does not match the toy MLP schema: {0}")]
    ModelSchema(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("evaluator failed (exit {0})")]
    EvaluatorExit(i32),
    #[error("evaluator failed: {0}")]
    EvaluatorFailed(String),
    #[error("unparsable evaluator output: {0}")]
    EvaluatorOutput(String),
    #[error("accuracy out of range: {0}")]
    AccuracyOutOfRange(f64),
    #[error("loss out of range: {0}")]
    LossOutOfRange(f64),
    #[error("evaluation failed for mixture {alpha}")]
    Search {
        alpha: MixtureVector,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate: constant series")]
    Degenerate,
    #[error("no task has enough pairs for a correlation")]
    NoCorrelation,
    #[error("score table incomplete: {0}")]
    IncompleteTable(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => ErrorKind::Io,
            Error::EvaluatorExit(_)
            | Error::EvaluatorFailed(_)
            | Error::EvaluatorOutput(_)
            | Error::AccuracyOutOfRange(_)
            | Error::LossOutOfRange(_) => ErrorKind::Evaluator,
            Error::Search { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn out_of_range(
        what: &'static str,
        value: impl ToString,
        min: impl ToString,
        max: impl ToString,
    ) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            min: min.to_string(),
            max: max.to_string(),
        }
    }
}

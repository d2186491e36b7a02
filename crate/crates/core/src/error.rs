use thiserror::Error;

/// Errors produced by matrix ingestion, selection, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },

    #[error("no family prefix matched any model id")]
    NoPrefixMatch,

    #[error("anchor set covers every item; no candidates left to swap in")]
    NoCandidates,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("eigen solver did not converge within {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("schema mismatch: missing columns {missing:?}, unexpected columns {extra:?}")]
    SchemaMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    /// The CLI maps these to exit code 2. Malformed CSV and JSON inputs count
    /// as user input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateId { .. }
                | Error::IndexOutOfRange { .. }
                | Error::DimensionMismatch { .. }
                | Error::InvalidArgument(_)
                | Error::EmptySplit { .. }
                | Error::NoPrefixMatch
                | Error::NoCandidates
                | Error::SchemaMismatch { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

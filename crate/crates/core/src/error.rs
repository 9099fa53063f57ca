use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("dataset `{0}` is degenerate after filtering (no interactions left)")]
    DegenerateDataset(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("negative sampling infeasible: {0}")]
    SamplingInfeasible(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("training infeasible: {0}")]
    TrainingInfeasible(String),

    #[error("embedding table `{0}` is frozen")]
    FrozenViolation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("cosine similarity undefined for a zero-norm vector")]
    UndefinedSimilarity,

    #[error("candidate list has {actual} entries, expected {expected}")]
    CandidateCount { expected: usize, actual: usize },

    #[error("cutoff K must be at least 1")]
    InvalidCutoff,

    #[error("evaluation cohort is empty")]
    EmptyCohort,

    #[error("bad container: {0}")]
    Format(String),

    #[error("missing artifact {path}: run `cdr {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

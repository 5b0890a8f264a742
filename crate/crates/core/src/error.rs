use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-monotone epoch: {epoch} is not after {last}")]
    NonMonotoneEpoch { epoch: u32, last: u32 },

    #[error("row length {got} does not match parameter count {expected}")]
    RowLength { expected: usize, got: usize },

    #[error("bad magic in snapshot file")]
    BadMagic,

    #[error("truncated snapshot file: {0}")]
    Truncated(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("cannot write an empty trajectory log")]
    EmptyLog,

    #[error("cannot sample {requested} of {available} indices")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    Layout { expected: usize, got: usize },

    #[error("non-finite value in layer {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least {need} epochs for correlations, got {got}")]
    TooFewEpochs { need: usize, got: usize },

    #[error("cannot form {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },

    #[error("mode {0} has no members")]
    EmptyMode(usize),

    #[error("empty candidate list")]
    NoCandidates,

    #[error("missing latent cache")]
    MissingCache,

    #[error("divergence: coordinate {coordinate} became non-finite at step {step}")]
    Divergence { coordinate: usize, step: usize },

    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),

    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonMonotoneEpoch { .. } => "non_monotone_epoch",
            Error::RowLength { .. } => "row_length",
            Error::BadMagic => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::SizeMismatch(_) => "size_mismatch",
            Error::EmptyLog => "empty_log",
            Error::SampleTooLarge { .. } => "sample_too_large",
            Error::Layout { .. } => "layout",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::TooFewEpochs { .. } => "too_few_epochs",
            Error::TooManyClusters { .. } => "too_many_clusters",
            Error::EmptyMode(_) => "empty_mode",
            Error::NoCandidates => "no_candidates",
            Error::MissingCache => "missing_cache",
            Error::Divergence { .. } => "divergence",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Artifact { .. } => "artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

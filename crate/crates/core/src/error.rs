use std::path::PathBuf;

use autodiff::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Every violated field of a configuration, reported together.
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("no strictly negative entry in the final bias gradient (min {min:e}); supply labels explicitly")]
    LabelRecovery { min: f64 },
    #[error("a generator is required for inversion mode {0}")]
    MissingGenerator(String),
    #[error("cost diverged to {0}")]
    Diverged(f64),
    #[error("every restart diverged")]
    AllRestartsDiverged,
    #[error("discrepancy: {0}")]
    Discrepancy(String),
    #[error("layer {layer} carries no gradient signal")]
    NoSignal { layer: usize },
    #[error("unsupported model for this attack: {0}")]
    Unsupported(String),
    #[error("unknown dataset family `{0}`")]
    UnknownFamily(String),
    #[error("node shard of {shard} examples is smaller than batch size {batch}")]
    ShardTooSmall { shard: usize, batch: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("incompatible runs: {0}")]
    Incompatible(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Graph(_) => "graph",
            Error::Shape(_) => "shape",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::EmptyBatch => "empty-batch",
            Error::Config(_) | Error::Invalid(_) => "config",
            Error::LabelRecovery { .. } => "label-recovery",
            Error::MissingGenerator(_) => "missing-generator",
            Error::Diverged(_) | Error::AllRestartsDiverged => "diverged",
            Error::Discrepancy(_) => "discrepancy",
            Error::NoSignal { .. } => "no-signal",
            Error::Unsupported(_) => "unsupported",
            Error::UnknownFamily(_) => "unknown-family",
            Error::ShardTooSmall { .. } => "shard-too-small",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Incompatible(_) => "incompatible",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

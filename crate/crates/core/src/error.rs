use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive produced NaN or an infinity.
    #[error("non-finite value produced by primitive `{primitive}`")]
    NonFinite { primitive: &'static str },

    #[error("{}:{line}: {msg}", file.display())]
    Load {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("window construction: {0}")]
    EmptyBatch(String),

    #[error("task sampling: {0}")]
    Sampling(String),

    #[error("target split: {0}")]
    Split(String),

    #[error("synthetic generator: {0}")]
    Synth(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Load { .. } => "load",
            Error::EmptyBatch(_) => "empty_batch",
            Error::Sampling(_) => "sampling",
            Error::Split(_) => "split",
            Error::Synth(_) => "synth",
            Error::Loss(_) => "loss",
            Error::Metric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownVariant(_) => "unknown_variant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

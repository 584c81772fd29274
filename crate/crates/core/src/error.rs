use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tap `{0}` was not registered before the forward pass")]
    UnknownTap(String),

    #[error("backward has not been run on this graph")]
    NoGradients,

    #[error("class {class} has {have} samples but k = {k}")]
    ClassTooSmall { class: usize, have: usize, k: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incomplete corruption grid, missing cells: {0:?}")]
    IncompleteGrid(Vec<(String, u8)>),

    #[error("non-finite loss at epoch {epoch} batch {batch}: {components}")]
    NonFiniteLoss { epoch: usize, batch: usize, components: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable kebab-case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::UnknownOp(_) => "unknown-op",
            Error::Invalid(_) => "invalid-argument",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::UnknownTap(_) => "unknown-tap",
            Error::NoGradients => "no-gradients",
            Error::ClassTooSmall { .. } => "class-too-small",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::IncompleteGrid(_) => "incomplete-grid",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

use thiserror::Error;

use crate::data::checkpoint::CheckpointError;
use crate::data::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} has {found} usable samples, at least {needed} required")]
    InsufficientClassSamples {
        class: usize,
        found: usize,
        needed: usize,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

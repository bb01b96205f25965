//! Reverse-mode differentiation, parameters, Adam and checkpoints.

mod checkpoint;
mod nn;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointDtype};
pub use nn::{linear, Linear};
pub use params::{AdamConfig, Gradients, Init, Param, ParamStore};
pub use tape::{Backward, Tape, Var, LAYER_NORM_VAR_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for `{param}` at index {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiffError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] sparseprop::Error),
    #[error("layer {layer}: {msg}")]
    ShapeChain { layer: usize, msg: String },
    #[error("layer {0} has no cached forward pass")]
    MissingForwardCache(usize),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("bundle {path}: {msg}")]
    Bundle { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub(crate) fn shape(layer: usize, msg: impl Into<String>) -> TrainError {
    TrainError::ShapeChain { layer, msg: msg.into() }
}

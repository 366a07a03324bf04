//! Differentiable building blocks: tensors, a reverse-mode tape, layers,
//! Adam and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod init;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointGroup, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::gradient_error;
pub use graph::{Bind, ConvGeom, Gradients, Graph, ScopeGuard, Var};
pub use layers::{
    conv_encoder_forward, layer_norm, mlp_forward, recurrent_step, ConvEncoder, ConvEncoderConfig,
    ConvLayerSpec, LayerNorm, Linear, LstmCell, Mlp, RecurrentState,
};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use params::{GradSet, ParamSet};
pub use tensor::{gemm, Scalar, Tensor};

#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};


use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value produced by `{op}` at `{path}`")]
    NonFinite { op: String, path: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! A small dense-tensor training engine: layer kernels with hand-written
//! backward passes, graph execution, Adam training and int8 quantization.

mod exec;
mod fold;
mod graph;
mod ops;
mod quant;
mod store;
mod tensor;
mod train;

pub use exec::{
    apply_layer, backward, forward, softmax_cross_entropy, Forward, Grads, LayerFootprint,
    RunOptions,
};
pub use fold::fold_batchnorm;
pub use graph::{
    concat_merge, padded_merge, ArchGraph, DownsampleMode, GraphBuilder, LayerSpec, MergeLayout,
    Node, Padding, ParamRole, ParamSpec,
};
pub use quant::{dequantize, quantize, quantize_store, QuantizedTensor};
pub use store::{key, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU, LOG_SIGMA2_SUFFIX};
pub use tensor::{matmul, Scalar, Tensor};
pub use train::{
    accuracy, predict, run_epoch, train, Adam, Dataset, EpochOptions, Optimizer, TrainHyperparams,
    TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch at node {node}: expected {expected}, got {got}")]
    ShapeMismatch {
        node: String,
        expected: String,
        got: String,
    },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {key} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        key: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
}

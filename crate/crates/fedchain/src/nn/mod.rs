//! From-scratch neural-network engine: tensors, layers, backprop, SGD.
//!
//! The engine is deliberately small: row-major f64 tensors, a closed set of
//! layer kinds (dense, 2-d convolution, max pooling, batch normalization,
//! flatten), a softmax head with cross-entropy loss, and plain SGD. Every
//! gradient is exact, which the test suite pins against central finite
//! differences. Determinism is part of the contract: given the same seed
//! and schedule, training produces bit-identical parameters.

mod layer;
mod model;
mod tensor;

pub use layer::{Activation, Layer, LayerCache, LayerGrads};
pub use model::{
    build_ann, build_cnn, cross_entropy, evaluate, load_checkpoint, load_checkpoint_file,
    save_checkpoint, save_checkpoint_file, AnnSpec, CnnSpec, ForwardCache, Gradients, Model,
};
pub use tensor::Tensor;

/// Errors from tensor algebra, model construction, and checkpoint IO.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} at row {index} outside {classes} classes")]
    InvalidLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("non-finite value produced: {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

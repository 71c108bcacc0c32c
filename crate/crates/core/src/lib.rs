//! Training engine for relevance-based selective weight decay with
//! iterative global magnitude pruning, sized for LeNet-5 on MNIST-class data.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod regularizer;
pub mod tensor;

pub use autodiff::{Conv2dAttrs, Gradients, Pool2dAttrs, Tape, Var};
pub use model::{build_lenet, LenetVariant, Mask, ModelError, ModelSpec, ParamEntry, ParamStore};
pub use tensor::{Element, Tensor, TensorError};

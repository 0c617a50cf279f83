//! Convolutional classifiers built from scratch, with training, evaluation and attribution.

pub mod arch;
pub mod autograd;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod xai;

pub use arch::{Arch, BuildError, ModelSpec};
pub use autograd::{Graph, NodeId};
pub use network::ModelParams;
pub use tensor::{Real, Tensor, TensorError};

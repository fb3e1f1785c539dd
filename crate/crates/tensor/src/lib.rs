//! Float64 tensors with a reverse-mode autodiff tape, the attention and
//! normalization blocks used by the networks, AdamW, and checkpoints.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{broadcast_shape, AttentionMask, Gradients, Tape, Var};
pub use tensor::Tensor;

//! Differentiable tensor substrate.
//!
//! Everything the network crates build on: a dense [`Tensor`], a reverse-mode
//! [`Graph`] covering the primitives the encoders and losses need, named
//! parameter storage, Adam, schedules, finite-difference checking and a
//! versioned checkpoint format. The scalar type is generic so the same model
//! code trains in `f32` and is verified in `f64`.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{Axis, Gradients, Graph, Var};
pub use optim::{adam_step, clip_global_norm, Adam, AdamConfig, AdamState};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use schedule::{cosine_lr, plateau_lr, Plateau};
pub use tensor::Tensor;

//! Reverse-mode differentiation, layers, optimiser and checkpoint records.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{mlp_forward, Linear, Mlp, MlpArch};
pub use optim::{adam_step, cosine_lr, Schedule};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{grad, Tape, Var};
pub use tensor::{matmul, Tensor};

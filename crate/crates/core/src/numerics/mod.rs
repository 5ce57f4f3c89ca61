//! Minimal dense tensors with reverse-mode gradients.

mod gradcheck;
pub mod init;
pub mod kernels;
mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use ops::{linear, mean, scaled_dot_attention, softmax};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;

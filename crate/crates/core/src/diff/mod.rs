//! Differentiable kernels, optimizer, and gradient-check harness.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use gradcheck::check_gradients;
pub use matrix::{cross_entropy, layer_norm, softmax_rows, Matrix};
pub use optim::{adam_step, AdamConfig, ParamSet, ParamTensor};
pub use tape::{Tape, Var};

//! Dense reverse-mode automatic differentiation and the Adam optimiser.

mod adam;
pub mod check;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{matmul_raw, Tensor};

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

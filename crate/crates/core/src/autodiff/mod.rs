//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Build a [`Tape`], register leaves with [`Tape::param`] or
//! [`Tape::constant`], compose operations, and call [`Tape::backward`] on a
//! scalar. The operator set is exactly what the backbone and the
//! distillation losses use.

mod tape;
mod tensor;

pub use tape::{softmax_in_place, Gradients, Tape, Var, LAYER_NORM_EPS, LOG_EPS};
pub use tensor::Tensor;

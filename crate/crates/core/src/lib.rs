//! Self-supervised point-cloud representation learning by distillation
//! between a momentum teacher and a student over global and local crops.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense `f64` tensors
//! - [`geometry`]: farthest-point sampling, kNN, cropping, normalization
//! - [`backbone`]: the point-cloud ViT and its projector head
//! - [`distill`]: losses, schedules, optimizer and the training loop
//! - [`data`]: synthetic shapes, OFF meshes, the `PCB1` container
//! - [`eval`]: linear probe, covariance spectrum, PCA, attention export

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod rng;

pub use autodiff::{Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};

//! Tensor engine: dense tensors, a reverse-mode tape, convolution kernels,
//! Adam and a finite-difference gradient checker.

mod adam;
pub(crate) mod conv;
mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{avg_pool, conv2d, conv2d_transpose};
pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use real::Real;
pub use rng::RngStream;
pub use tensor::Tensor;

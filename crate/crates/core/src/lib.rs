//! Inference of polynomial ODE right-hand sides from sampled trajectories.
//!
//! Models are trained by minimizing discretized trajectory-matching losses
//! with reverse-mode differentiation and gradient descent.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod integrators;
pub mod linalg;
pub mod loss;
pub mod models;
pub mod optimize;
pub mod systems;

pub use error::{Error, Result};
pub use linalg::Tensor;
pub use loss::Trajectory;

//! Dense 64-bit numerical substrate: tensors, a reverse-mode autodiff graph,
//! named parameter storage, a seeded RNG and a finite-difference gradient
//! checker. Everything above this module is expressed in terms of these
//! pieces.

pub mod grad_check;
pub mod graph;
mod kernels;
pub mod ops;
pub mod rng;
mod scalar;
pub mod store;
pub mod tensor;

pub use grad_check::{grad_check, grad_check_sampled};
pub use graph::{Gradients, Graph, TensorId};
pub use rng::Rng;
pub use store::{Param, ParamStore};
pub use tensor::{GaussianParams, Tensor};

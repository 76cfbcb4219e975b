//! Dense tensors, a recorded-op differentiation engine and gradient checks.

mod gradcheck;
mod graph;
mod kernels;
mod linalg;
mod params;
mod tensor;
pub mod tnsr;

pub use gradcheck::{analytic_grads, finite_diff_check};
pub use graph::{logistic, softplus, Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

//! Dense `f64` tensors and a tape-based reverse-mode autodiff.

mod graph;
mod tensor;

pub use graph::{Graph, Var, MIN_NORM};
pub use tensor::Tensor;

pub(crate) use graph::{l2_norm, softmax_in_place, sq_dist};

#[cfg(test)]
pub(crate) mod fd;

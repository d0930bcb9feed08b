//! Reverse-mode differentiation over dense row-major tensors.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{ConvAlgo, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use tensor::Tensor;

//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::{Mask, Precision, Tensor};

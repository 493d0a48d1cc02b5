//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckOptions, GradCheckReport};
pub use params::{Param, ParamStore};
pub use tape::{Activation, NodeId, Reduction, Tape, BCE_CLAMP, COSINE_EPS};
pub use tensor::Tensor;

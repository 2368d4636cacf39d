//! Dense `f64` tensors and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{l2_norm, sigmoid, softmax, Gradients, Tape, Var};
pub use tensor::Tensor;

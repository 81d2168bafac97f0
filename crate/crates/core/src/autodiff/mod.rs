//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, DEFAULT_EPS};
pub use tape::{Mode, Tape, Var};
pub use tensor::{logsumexp, matmul_raw, sigmoid_scalar, Tensor};

//! Dense kernels, Adam, and the finite-difference checker used to validate
//! every hand-written backward pass.

mod adam;
mod finite_diff;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error, RELATIVE_ERROR_FLOOR};
pub use matrix::{add_into, axpy, dot, norm2, Matrix};
pub(crate) use ops::{l2_normalize_in_place, softmax_in_place};
pub use ops::{
    l2_normalize, l2_normalize_backward, l2_normalize_with_norm, sigmoid, softmax,
    softmax_backward, NORM_EPS,
};

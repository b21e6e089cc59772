//! Reverse-mode differentiation over dense tensors.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{check_gradient, check_param_gradients, relative_error, GradCheckReport, Worst};
pub use tape::{Axis, Tape, Var};

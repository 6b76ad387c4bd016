//! Minimal reverse-mode automatic differentiation.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_with_floor, relative_error, GradCheckReport, DEFAULT_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

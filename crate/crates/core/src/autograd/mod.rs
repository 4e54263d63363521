//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

pub mod gradcheck;
pub mod math;
mod tape;
mod tensor;

pub use tape::{argmax, OpKind, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The primitive set is deliberately small: exactly what the memory network's
//! forward pass needs. Shapes never broadcast; mismatches are hard errors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{inject_tanh_backward_fault, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

//! Reverse-mode autodiff on dense 2-D tensors.
//!
//! The model code in this crate is small enough that an external deep
//! learning framework would cost more in build weight and reproducibility
//! risk than this module does in lines: a tape of ~20 primitive ops covers
//! attention, recurrence, and the loss, and keeps every number an f64 we can
//! serialize bit-for-bit.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

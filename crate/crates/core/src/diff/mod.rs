//! Reverse-mode differentiation over a fixed op catalog.
//!
//! A [`Tape`] records every value produced by its methods; [`Tape::backward`]
//! walks the record in reverse. Values are `f64` throughout. Parameter stores
//! may round their contents to `f32` between optimizer steps
//! (see [`crate::nets::Precision`]).

pub mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::Padding;
pub use gradcheck::{grad_check, grad_check_against, GradCheckOptions, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Epsilon inside the square root of per-channel standard deviations.
pub const STD_EPS: f64 = 1e-8;

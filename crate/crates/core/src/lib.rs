//! Image-editing neural style transfer.
//!
//! The stylizer predicts RGB deltas over a simplified, recoloured and faded
//! copy of the content image (the *content prior*). Training combines
//! feature-statistics, perceptual, identity, adversarial and contrastive
//! terms with two patch co-occurrence discriminators that see low- and
//! high-frequency patches separately, split by Sobel magnitude.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
pub mod evalkit;
pub mod imgproc;
pub mod infer;
pub mod losses;
pub mod nets;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{NeatError, Result};
pub use imgproc::ImageTensor;

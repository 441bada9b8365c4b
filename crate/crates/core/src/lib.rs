//! Parallel-pathway convolutional networks for image aesthetics assessment.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`layers`], [`network`], [`optim`], [`gradcheck`]: a small
//!   f64 tensor engine with hand-written backward passes.
//! - [`rgb`], [`color`], [`augment`]: images, HSV feature planes and the
//!   candidate label-preserving transformations.
//! - [`rating`]: rating histograms, Gaussian summaries and losses.
//! - [`bradley_terry`]: pairwise-preference fitting for LP factors.
//! - [`arch`], [`checkpoint`]: network construction and persistence.
//! - [`data`], [`train`], [`metrics`]: datasets, the staged training
//!   protocol, and evaluation.

pub mod arch;
pub mod augment;
pub mod bradley_terry;
pub mod checkpoint;
pub mod color;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rating;
pub mod rgb;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod tests;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

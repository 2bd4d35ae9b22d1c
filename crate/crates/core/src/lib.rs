//! Core library for training families of small convolutional classifiers on
//! synthetic image data, computing complexity measures on the trained models,
//! and correlating those measures with generalization.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`] / [`rng`] / [`linalg`]: a minimal deterministic numeric kernel
//!   (dense `f32` tensors, the layer primitives the architectures need,
//!   power-iteration spectral norms, seeded splittable randomness).
//! - [`model`]: architecture description, parameter storage with the
//!   initialization snapshot, forward inference and checkpoint I/O.
//! - [`synthdata`]: deterministic synthetic binary-class image generation with
//!   segmentation masks, distribution-shift variants, splits, and a bit-exact
//!   file format.
//! - [`trainer`]: losses, Adam with hand-rolled backprop, two stopping
//!   criteria, training traces, and evaluation metrics.
//! - [`measures`]: the margin and the 25 complexity measures of a trained
//!   checkpoint.
//! - [`correlation`]: Kendall, granulated, and robustness-weighted rank
//!   statistics between measures and generalization.
//!
//! Everything is deterministic given explicit seeds: same inputs, same bytes.

pub mod correlation;
pub mod error;
pub mod linalg;
pub mod measures;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;

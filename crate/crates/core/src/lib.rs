//! Adversarial attack and defense toolkit for CSI-based human activity
//! recognition classifiers.
//!
//! The crate provides:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation,
//!   covering exactly the primitives the classifier needs (valid
//!   convolution, max pooling, dense layers, softmax, cross-entropy and KL
//!   losses) with gradients w.r.t. both parameters and inputs.
//! - [`model`]: the convolutional activity classifier and its checkpoint
//!   format.
//! - [`attack`]: Gaussian-noise, FGSM, bimodal, and antenna/subcarrier-level
//!   adversarial example generators.
//! - [`defense`]: supervised baseline training, adversarial training with
//!   selectable loss terms, and consistency training that penalizes the
//!   Jensen-Shannon divergence between predictions on clean and attacked
//!   inputs.
//! - [`data`]: a seeded synthetic CSI-like dataset generator with a stable
//!   binary format and stratified splitting.
//! - [`eval`]: accuracy sweeps over attack grids, random-hyperparameter
//!   attack protocols, local-attack evaluation, and feature export.

pub mod attack;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

//! Prototype-based pseudo-labeling for source-free domain adaptation.
//!
//! Given a source-trained model and unlabeled target data, the crate builds
//! class prototypes from target features and uses them to pseudo-label the
//! target set for self-training. The static strategies live in
//! [`labeling`], the per-minibatch EMA prototypes in [`dynamic`], the
//! losses and the trainable model in [`objectives`], and the training
//! schedule in [`engine`]. [`benchmark`] generates synthetic two-domain
//! Gaussian mixtures and [`metrics`] scores the results.

pub mod benchmark;
pub mod clustering;
pub mod dynamic;
pub mod engine;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};

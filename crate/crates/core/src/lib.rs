//! Multi-label facial action unit (AU) detection with a lightweight CNN,
//! softmax attention pooling over spatial positions, and a class-reweighted
//! binary cross-entropy objective, all trained from scratch on the CPU.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape with the handful of primitives the model
//!   uses, and a finite-difference checker.
//! - [`model`]: six conv blocks, attention pooling, sigmoid head.
//! - [`objective`]: class weights, weighted BCE, macro F1.
//! - [`dataio`]: annotation/image I/O, dataset index, batching, and a
//!   synthetic dataset generator.
//! - [`trainer`]: Adam, the step learning-rate schedule, the epoch loop,
//!   evaluation and checkpoints.
//! - [`verify`]: the gradient-check suite run by `auattn gradcheck`.

pub mod autodiff;
pub mod dataio;
mod error;
pub mod exec;
pub mod model;
pub mod objective;
mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Names of the twelve AUs annotated in the Aff-Wild2 AU track, in column
/// order.
pub const DEFAULT_AU_NAMES: [&str; 12] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub const NUM_AUS: usize = 12;

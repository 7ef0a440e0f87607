//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s,
//! limited to the primitives the detector needs, plus a finite-difference
//! checker.
//!
//! ```
//! use auattn::autodiff::Tape;
//! use auattn::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(&Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```
//!
//! [`Tensor`]: crate::tensor::Tensor

mod activation;
mod conv;
pub mod gradcheck;
mod linear;
mod norm;
mod reduce;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Stencil};
pub use norm::{update_running, BatchStats, BN_EPSILON, BN_MOMENTUM};
pub use tape::{Backward, Gradients, Tape, Var};


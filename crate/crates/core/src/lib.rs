//! Core of a hierarchical attention model for action anticipation.
//!
//! Everything in this crate needs only `alloc`: a dense tensor with a
//! reverse-mode tape, the Transformer encoder layer used for temporal,
//! cross-modality and symbiotic attention, the cascaded verb/noun/action
//! model, cross-entropy and equalization losses, SGD with momentum, and the
//! mean top-k recall metric. File formats, synthetic data, training loops and
//! the command line live in the `transaction` crate.
#![no_std]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod kernels;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

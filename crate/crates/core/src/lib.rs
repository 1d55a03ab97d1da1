//! Recursive flow matching on desk-scale dynamical systems.
//!
//! The crate is `no_std` + `alloc`: file formats, the command line and
//! plotting live in the `recfm` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod interpolant;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

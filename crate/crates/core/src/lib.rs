//! Core algorithms for comparing faces: procedural identity/attribute synthesis,
//! stochastic augmentation, a small convolutional encoder with explicit backward
//! passes, the contrastive and change-regression objectives, curriculum-scheduled
//! pair sampling, downstream change estimation, and Eigen-CAM saliency.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of its
//! inputs and explicit seeds; file formats, run directories and the command line
//! live in the `comface` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod augment;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use real::Real;

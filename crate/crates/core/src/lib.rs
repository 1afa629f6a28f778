//! Self-adaptive training on a small dense-tensor engine.
//!
//! Everything here is pure computation over `alloc` collections: the crate is
//! `no_std` and leaves file formats, configuration and the command line to the
//! `satlab` companion crate.
//!
//! Layout:
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`]: the numeric substrate (row-major
//!   `f64` tensors, a reverse-mode tape, ReLU MLPs, momentum SGD with schedules).
//! - [`data`], [`noise`]: Gaussian blob datasets and the corruption schemes.
//! - [`losses`]: scalar reference implementations of every training objective.
//! - [`sat`]: supervised self-adaptive training with EMA targets and re-weighting.
//! - [`selective`]: abstention-class training and risk/coverage evaluation.
//! - [`ssl`], [`probe`]: self-supervised bootstrap training and linear evaluation.
//! - [`eigen`], [`convergence`]: exact verification of the alternating
//!   least-squares/EMA dynamics on linear models.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod convergence;
pub mod data;
pub mod eigen;
mod error;
pub mod losses;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod probe;
pub mod report;
pub mod rng;
pub mod sat;
pub mod selective;
pub mod ssl;
pub mod tensor;
mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

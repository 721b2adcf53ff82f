//! Differentially-private federated fine-tuning of low-rank adapters.
//!
//! Module map:
//!
//! - [`matrix`] / [`random`]: dense `f64` matrices and seeded, splittable
//!   Gaussian sampling.
//! - [`dp`]: Frobenius clipping, Gaussian-mechanism calibration, per-factor
//!   privatization.
//! - [`lora`]: adapters, the forward rule and stacking aggregation.
//! - [`fedsim`]: synthetic tasks, local training, the round loop and seven
//!   server strategies.
//! - [`noise`]: Monte Carlo and closed-form analysis of `(B + beta)(A + alpha)`.
//! - [`mia`]: the membership-inference distinguishing game and ROC-based
//!   `(epsilon, delta)` checks.
//! - [`config`] / [`runner`]: the `key = value` run configuration and the
//!   command implementations behind the `fedlora-dp` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod matrix;
pub mod random;
pub mod dp;
pub mod lora;

pub use error::{Error, Result};
pub use matrix::{stack_h, stack_v, Matrix};
pub use random::{sample_gaussian, RngStream};
pub mod noise;
pub mod fedsim;
pub mod output;
pub mod mia;
pub mod config;
pub mod verify;
pub mod runner;

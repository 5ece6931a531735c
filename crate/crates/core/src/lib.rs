//! Neural processes (CNP, NP, CANP, ANP) and their bootstrapping extensions
//! (BNP, BANP) for 1D meta-regression.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: reverse-mode autodiff, MLP layers, Adam, cosine schedule,
//!   checkpoint records.
//! - [`taskgen`]: GP-prior task generation with RBF, Matérn-5/2 and periodic
//!   kernels, Gaussian and Student-t observation noise.
//! - [`npmodels`]: the baseline model families and their encoders/decoders.
//! - [`bootstrap`]: paired and residual bootstrap of contexts, the adaptation
//!   decoder and the ensemble predictive density.
//! - [`train`]: objectives, the meta-training loop and checkpoints.
//! - [`evalsuite`]: log-likelihoods, calibration error and sharpness.
//! - [`bayesopt`]: Bayesian optimisation with GP and neural-process surrogates.
//! - [`cli`]: configuration parsing and the `bnp` command-line driver.

pub mod bayesopt;
pub mod bootstrap;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod fmt;
pub mod npmodels;
pub mod rng;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};

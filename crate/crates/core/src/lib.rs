//! Semi-analytic sequential Monte Carlo for semi-linear inverse problems,
//! applied to multi-dipole source estimation from MEG time series.
//!
//! The linear dipole moments are integrated out analytically; an adaptive
//! tempered SMC sampler explores only the number and locations of the
//! dipoles, and the moments are recovered from their Gaussian conditional
//! posterior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimate;
pub mod experiments;
pub mod forward;
pub mod full_smc;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod smc;

pub use error::{Error, Result};

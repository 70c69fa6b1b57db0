//! Fairness-constrained policy optimization for sequential recommendation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod baselines;
pub mod cpo;
pub mod critic;
pub mod env;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod pmf;
pub mod rng;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};

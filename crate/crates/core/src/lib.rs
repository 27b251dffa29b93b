//! Perturbation-based feature attribution with perturbation-aware
//! recalibration.
//!
//! The crate covers the whole loop: data and synthetic ground-truth
//! generators ([`data`]), classifiers including exact Bayes oracles
//! ([`model`]), perturbations and restricted prediction ([`perturbation`]),
//! temperature scaling and per-perturbation-level recalibration
//! ([`calibration`]), information-theoretic calibration metrics
//! ([`metrics`]), attribution methods ([`explainers`]) and downstream
//! evaluation harnesses ([`evaluation`]). The `recalx` binary ([`cli`])
//! wires them into reproducible runs.

// range checks are written as `!(x > lo)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explainers;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod perturbation;
pub mod rng;

pub use error::{Error, Result};

//! Classifier-based calibration diagnostics for approximate Bayesian inference.
//!
//! A simulation table of `(θ, y, θ̃₁..θ̃_M)` runs is turned into batches of
//! labelled classification examples ([`label_mapping`]), a classifier is
//! trained on part of them ([`classifier`]), and its validation log predictive
//! density becomes a divergence estimate with a Bayesian-bootstrap interval and
//! an exact within-batch permutation p-value ([`diagnostics`]).
//!
//! [`sim_model`] generates Gaussian scenarios with known posteriors and
//! [`oracle`] provides the closed-form, Monte-Carlo and brute-force ground
//! truth those scenarios are checked against.

pub mod classifier;
pub mod diagnostics;
pub mod error;
pub mod label_mapping;
pub mod oracle;
pub mod rng;
pub mod sim_model;

pub use error::{Error, Result};

//! Gradient-estimator laboratory for multi-sample variational objectives.
//!
//! The crate implements the importance-weighted bound, its standard,
//! sticking-the-landing and doubly reparameterized gradient estimators, the
//! reweighted wake-sleep and jackknife variants, the surrogate objectives
//! that express each of them as a single differentiable scalar, and the
//! statistics used to audit their bias, variance and signal-to-noise ratio.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod tape;
pub mod gaussian;
pub mod models;
pub mod estimators;
pub mod diagnostics;
pub mod data;
pub mod cli;

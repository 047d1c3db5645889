//! Federated averaging with client-side clipping and Gaussian privacy noise,
//! together with the tools to analyse what clipping does to it: exact
//! one-round fixed points, bias diagnostics, and the terms of the
//! nonconvex convergence bound.

pub mod clipping;
pub mod diagnostics;
pub mod engine;
pub mod fixedpoint;
pub mod error;
pub mod privacy;
pub mod problems;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};

/// Flattened model parameters.
pub type ModelVector = nalgebra::DVector<f64>;

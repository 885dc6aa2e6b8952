//! Desk-scale laboratory for stochastic flow matching between low-dimensional
//! distributions.
//!
//! The crate trains a velocity/score network pair on paired samples from a
//! source and a conditional target distribution, samples the learned transport
//! either deterministically (ODE) or with marginal-preserving stochasticity
//! (SDE), decomposes predictive variance into aleatoric and epistemic traces
//! via nested Monte Carlo with optional antithetic variance reduction, and
//! turns those traces into anomaly scores for unreliable-generation detection.

pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod interpolant;
pub mod nets;
pub mod numkit;
pub mod posterior;
pub mod sample;
pub mod train;
pub mod uq;

pub use error::{Error, Result};

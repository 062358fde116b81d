//! Simulation of machine-learning predictors that compete for a stream of
//! users and may buy user labels with a finite budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: user distribution (CSV ingestion, synthetic mixtures,
//!   standardization, label noise, splits, i.i.d. streaming)
//! - [`models`]: online classifiers trained with Adam
//! - [`strategy`]: entropy-threshold buying rule and budget accounting
//! - [`environment`]: the per-round competition dynamics
//! - [`metrics`]: overall quality, QoE, diversity and friends
//! - [`theory`]: closed-form QoE, bounds and the sufficient condition for a
//!   QoE drop under higher overall quality
//! - [`harness`]: config parsing, grid execution, report emission

pub mod dataset;
pub mod environment;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod strategy;
pub mod theory;

pub use error::{Error, Result};

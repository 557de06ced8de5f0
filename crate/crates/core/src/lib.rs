//! Bayesian federated learning over a simulated analog multiple-access channel.
//!
//! Devices run Langevin updates on local shards and periodically average their
//! particles over the air; the channel noise doubles as the shared Langevin
//! noise. The crate provides the samplers, exact posterior oracles, Wasserstein
//! and drift diagnostics, and a sweep harness writing CSV results.

pub mod analysis;
pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};

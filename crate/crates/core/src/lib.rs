//! Energy-efficient resource allocation for an OFDMA downlink whose base
//! station draws power from a battery charged by random energy arrivals and
//! from a capped non-renewable supply.
//!
//! The crate provides the system model, a scenario generator, an offline
//! solver with full knowledge of future channels and arrivals, a causal
//! per-epoch online solver, a dynamic-programming benchmark for toy sizes,
//! brute-force oracles and an experiment runner.

pub mod dp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod offline;
pub mod online;
pub mod oracle;
pub mod scenario;

pub use error::{Error, Result};
pub use model::{Epoch, EpochAlloc, Multipliers, Policy, SystemConfig};
pub use scenario::{EventTrace, Timeline};

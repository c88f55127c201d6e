//! Fair survey design under per-group confidence constraints.
//!
//! The crate covers the whole pipeline: populations segmented by group and
//! region ([`population`]), differentially private counts and their clamping
//! bias ([`privacy`]), empirical variance proxies that turn confidence
//! targets into sample requirements ([`proxy`]), cost-minimizing allocations
//! ([`allocator`]), Monte Carlo execution against ground truth
//! ([`simulator`]), evaluation metrics ([`metrics`]) and config-driven
//! experiments ([`experiment`]).
//!
//! Every random draw comes from a stream derived from a base seed and the
//! unit of work it belongs to ([`rng`]), so results are identical whether
//! work runs sequentially or in parallel ([`par`]).

pub mod allocator;
pub mod error;
pub mod metrics;
pub mod par;
pub mod population;
pub mod privacy;
pub mod proxy;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
pub mod experiment;

//! Fine-grained, cost-aware active learning for joint perception and
//! prediction, simulated at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`scenegen`]: synthetic scene pools (actors, trajectories, sensor rasters).
//! - [`oracle`]: region-level labeling oracle with deduplicated actor cost.
//! - [`model`]: per-anchor detector with a Gaussian-mixture trajectory head,
//!   trained under region-masked partial supervision.
//! - [`scoring`]: detection/prediction entropy, Core-Set and the cost proxy.
//! - [`selection`]: budgeted greedy region selection and random baselines.
//! - [`metrics`]: AP, meanADE, per-action breakdowns and label statistics.
//! - [`harness`]: the iterative score → select → label → retrain → evaluate loop.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod persist;
pub mod rng;
pub mod scenegen;
pub mod scoring;
pub mod selection;

pub use error::{Error, Result};

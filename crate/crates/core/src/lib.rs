//! Federated domain generalization on tabular data: per-client adversarial
//! novel-domain generation with a teacher, a student and a perturbation
//! generator, and sharpness-aware hierarchical aggregation on the server.
//!
//! Everything is `f64` and seed-deterministic; parallel and sequential
//! execution produce bit-identical results.

pub mod bench;
pub mod config;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndag;
pub mod params;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod sha;

pub use error::{Error, Result};
pub use params::ParamVector;

//! Deterministic simulator for federated distillation with per-client
//! architecture search.

pub mod client;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nas;
pub mod nn;
pub mod rng;
pub mod server;

pub use error::{Error, Result};

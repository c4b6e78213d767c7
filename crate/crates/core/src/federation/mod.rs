//! Experiment configuration, the round loop for every method, and byte accounting.

mod accounting;
mod config;
mod sim;

pub use accounting::{account_bytes, round_bytes, ByteAccount};
pub use config::{DataConfig, DataKind, ExperimentConfig, Method, NasConfig, ServerConfig};
pub use sim::{
    average_models, run_baseline, run_experiment, ClientRecord, ExperimentResult, RoundRecord,
    Simulation, Summary,
};

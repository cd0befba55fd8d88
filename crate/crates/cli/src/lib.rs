//! Experiment driver for monotonic Taylor neural networks: data generation,
//! training with a learning-rate sweep, multi-step evaluation tables and
//! closed-loop MPC runs, all driven by one TOML file.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_gen_data, cmd_mpc, cmd_train, DataManifest, EvalReport, MpcReport, TrainReport};
pub use config::{ExperimentConfig, Variant};

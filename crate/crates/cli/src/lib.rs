//! Command-line front end: run configuration and the experiment commands.

pub mod commands;
pub mod config;

pub use commands::{cmd_collect, cmd_identify, cmd_mpc, cmd_noise, cmd_predict, Models, PredictionTable, TrackingRun};
pub use config::{RunConfig, Stream};

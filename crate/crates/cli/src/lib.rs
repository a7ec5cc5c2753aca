//! Subcommands behind the `propscale` binary, usable as library calls.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    align_with_dataset, cmd_ablate, cmd_evaluate, cmd_oracle_check, cmd_prepare, cmd_simulate, cmd_train, SimSummary,
    TrainSummary, CHECKPOINT, HISTORY, ORDERS, REPORT, TRACE,
};
pub use config::{resolve, write_resolved, Overrides, RESOLVED};
pub use error::{CliError, ErrorClass};

//! Command-line driver: configuration loading, training runs, frozen-pool
//! evaluation, pool inspection and offline metrics.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_eval, cmd_inspect, cmd_metrics, cmd_train, EvalReport, RunMetrics, TrainSummary};
pub use config::{load_config, parse_override_args, Config};
pub use error::CliError;

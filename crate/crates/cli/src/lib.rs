//! Configuration loading and command pipelines behind the `cloud-uzawa`
//! binary.

pub mod commands;
pub mod config;
pub mod trace;

pub use commands::{cmd_run, cmd_solve, cmd_stepsize, obtain_saddle, CliError, RunReport, SaddleInfo};
pub use config::{load_config, parse_config, ConfigError, Rho, RunConfig};

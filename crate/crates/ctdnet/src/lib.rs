//! File formats, run configuration and subcommands for the `ctdnet`
//! harness on top of `ctdnet-core`.

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod run;

pub use config::RunConfig;

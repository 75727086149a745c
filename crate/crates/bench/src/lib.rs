//! Benchmark and verification harness: the `ptb` command line, timed runs of
//! every solver variant, and MLUP/s reports.

pub mod cli;
pub mod report;
pub mod runner;

pub use cli::cli_main;

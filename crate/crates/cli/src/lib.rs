//! Experiment harness: configuration, reports and the experiment commands.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::ExperimentConfig;
pub use experiments::Context;
pub use report::{Report, ReportRow, SeedResult};

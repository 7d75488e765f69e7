//! Experiment harness for `liera-core`: JSON configs, LCKP checkpoints, CSV
//! reports, verification suites and the `liera-lab` command line.

pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod run;
pub mod suites;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};

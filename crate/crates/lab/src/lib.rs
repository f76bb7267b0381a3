//! Configuration files, persistence, parallel sweeps and the `semidiff`
//! command-line front end around `semidiff-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pseudo_io;
pub mod report;
pub mod runner;
pub mod sweep;
pub mod table;

pub use config::ExperimentConfig;
pub use error::LabError;

//! Experiment orchestration for the sievae workbench: configuration
//! profiles, single training cells, sweeps and report tables.

pub mod commands;
pub mod config;
pub mod record;
pub mod report;
pub mod run;
pub mod sweep;

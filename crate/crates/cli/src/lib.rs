//! Run configuration, experiment orchestration and reports for the
//! `multiquant` command.

pub mod config;
pub mod experiment;
pub mod report;

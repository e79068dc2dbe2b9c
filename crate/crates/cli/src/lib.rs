//! Experiment runner around the `polydreg` core: config files, single runs,
//! resumable sweeps, checkpoints and the statistics report.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod sweep;
pub mod commands;

//! Dataset IO, run artifacts and the `drnet` command line on top of `drnet-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod fsutil;
pub mod manifest;
pub mod report;

//! File formats, run configuration and the command line around `d2r-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod export;
pub mod idx;
pub mod metrics;
pub mod plots;

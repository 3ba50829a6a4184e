//! Experiment orchestration for the watermark-preserving editor: config
//! loading, staged runs, reports and the `safemark-lab` command line.

pub mod cli;
pub mod config;
pub mod lab;
pub mod report;

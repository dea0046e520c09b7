//! File formats, configuration, run directories and command
//! implementations for the `marnet` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod qnt;
pub mod raster;
pub mod run;

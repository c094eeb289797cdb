//! Configuration, datasets, persistence, reports and the command-line driver.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod report;
pub mod run;

//! Command-line front end: scenario runner, live gateway and memory dump.

pub mod gateway;
pub mod runner;

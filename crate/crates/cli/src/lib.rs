//! Experiment runner behind the `klq` binary.

pub mod commands;
pub mod config;

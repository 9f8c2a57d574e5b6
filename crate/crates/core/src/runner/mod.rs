//! Experiment orchestration and persistence.

pub mod config;
pub mod io;
pub mod run;
pub mod sweep;

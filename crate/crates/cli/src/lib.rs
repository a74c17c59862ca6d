//! Experiment harness around `staleracer-core`: configuration files,
//! replicated sweeps, Monte-Carlo verification and the acceptance suite.

pub mod accept;
pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;
pub mod verify;

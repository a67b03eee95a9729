//! Command-line pipeline around `consult-core`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

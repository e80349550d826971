//! Experiment harness for the weak-guidance laboratory: TOML configuration,
//! seeded experiment orchestration over a worker pool, and CSV / JSON-lines
//! / summary outputs. The `weakguide` binary is a thin CLI over this crate.

pub mod config;
pub mod experiments;
pub mod report;

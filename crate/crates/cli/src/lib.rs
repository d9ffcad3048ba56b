//! Scenario runner: config schema, builtin scenarios, stage execution and run reports.

pub mod builtins;
pub mod config;
pub mod report;
pub mod slope;
pub mod stages;

//! Workspace-oriented front end: generate a synthetic slice dataset, run
//! the two-stage hyper-parameter search over it, resume interrupted runs
//! from the trial ledger, and render the report files.

pub mod commands;
pub mod config;
pub mod objective;
pub mod report;
pub mod workspace;

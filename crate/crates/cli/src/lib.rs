//! Experiment plumbing behind the `hgs` binary.

pub mod commands;
pub mod method;
pub mod reproduce;

//! Std companion of `ufuzz-core`: wire protocol, agent, controller,
//! watchdog, campaign database and the command-line front end.

pub use ufuzz_core as core;

pub mod wire;
pub mod agent;
pub mod watchdog;
pub mod controller;
pub mod db;
pub mod cli;

//! Std companion to `selenc-core`: the federated protocol runner, config and
//! key files, report writers and benchmarks behind the `selenc` binary.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod keyfile;
pub mod protocol;
pub mod report;

//! Renewable code and data on a small deterministic virtual machine.

pub mod bench;
pub mod blockdb;
pub mod client;
pub mod engines;
pub mod extractor;
pub mod protocol;
pub mod server;
pub mod vm;
pub mod wire;

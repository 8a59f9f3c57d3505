//! Functional side of near-storage optimizer offload: file-backed devices with
//! a traffic ledger, the per-device transfer handler, a mixed-precision
//! training engine that runs each offload mode end to end, experiment configs,
//! CSV reports and the conformance suites behind the `nearstore` CLI.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fabric;
pub mod handler;
pub mod report;
pub mod store;
pub mod verify;

pub use error::{Error, Result};
pub use nearstore_core as core;

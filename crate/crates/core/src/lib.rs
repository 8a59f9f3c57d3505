//! Hardware-free building blocks for near-storage optimizer offload.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: the AXPBY-based updaters and mixed-precision checks, Top-K
//! gradient compression, parameter/subgroup/stripe layouts, the per-edge
//! traffic ledger, iteration traces and the discrete-event timing model that
//! replays them. File-backed devices, the threaded transfer handler, the
//! training engine and the CLI live in the `nearstore` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod calibration;
pub mod compression;
pub mod error;
pub mod layout;
pub mod ledger;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod topology;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
pub use half::f16;

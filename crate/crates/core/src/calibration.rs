//! A paper-scale workload for timing experiments: a 4-billion-parameter
//! transformer trained with Adam, split into 40 equal blocks, on the default
//! device bandwidths.
//!
//! The compute constants are calibration inputs, not measurements. Forward and
//! backward are short next to the update (the update dominates offloaded
//! training), and the host CPU optimizer runs at 6.4 GB/s of update input,
//! which is slower than a saturated host link can feed it.

use alloc::vec;

use crate::error::Result;
use crate::numerics::OptimizerKind;
use crate::sim::{simulate, summarize, Breakdown, SimConfig, Timeline};
use crate::topology::{DeviceDesc, DeviceKind, FabricTopology};
use crate::workload::{build_iteration, Mode, WorkloadShape};

pub const PARAMS: u64 = 4_000_000_000;
pub const BLOCKS: usize = 40;
pub const FORWARD_S: f64 = 0.4;
pub const BACKWARD_S: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub shape: WorkloadShape,
    pub topology: FabricTopology,
    pub sim: SimConfig,
}

impl Scenario {
    pub fn run(&self) -> Result<(Timeline, Breakdown)> {
        self.topology.validate()?;
        let trace = build_iteration(&self.shape)?;
        let tl = simulate(&trace, &self.topology, &self.sim)?;
        let b = summarize(&tl);
        Ok((tl, b))
    }
}

/// BASE runs on plain SSDs, every other mode on CSDs with the same bandwidths.
pub fn paper_like(mode: Mode, devices: usize, compression_pct: f64) -> Scenario {
    let kind = if mode.near_storage() { DeviceKind::Csd } else { DeviceKind::Ssd };
    let desc = DeviceDesc { kind, ..DeviceDesc::csd() };
    let per_block = PARAMS / BLOCKS as u64;
    let shape = WorkloadShape {
        mode,
        optimizer: OptimizerKind::Adam,
        blocks: vec![per_block; BLOCKS],
        devices,
        accel_mem_capacity: desc.accel_mem_capacity,
        host_subgroup_elems: per_block,
        stripe_bytes: 1 << 20,
        compression_pct: mode.compressed().then_some(compression_pct),
        forward_s: vec![FORWARD_S / BLOCKS as f64; BLOCKS],
        backward_s: vec![BACKWARD_S / BLOCKS as f64; BLOCKS],
    };
    Scenario { shape, topology: FabricTopology::uniform(desc, devices), sim: SimConfig::default() }
}

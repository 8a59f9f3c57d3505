//! Byte-exact traffic counters per fabric edge, direction and phase.

use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Update,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Forward, Phase::Backward, Phase::Update];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }

    /// Category label used in breakdown reports.
    pub fn label(self) -> &'static str {
        match self {
            Phase::Forward => "FW",
            Phase::Backward => "BW + Gradients Offload",
            Phase::Update => "Update + Optimizer states Upload/Offload",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Update => "update",
        })
    }
}

/// `Host` is the shared system interconnect between host memory and a device;
/// `Internal` is a CSD's private SSD <-> accelerator path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    Host,
    Internal,
}

/// Reads move data away from the SSD, writes toward it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

const SLOTS: usize = 2 * 2 * 3;

fn slot(edge: Edge, dir: Direction, phase: Phase) -> usize {
    (edge as usize * 2 + dir as usize) * 3 + phase.index()
}

/// Plain copy of ledger counters; supports differences between two points in time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrafficSnapshot {
    counts: Vec<u64>,
}

impl TrafficSnapshot {
    pub fn zeros(devices: usize) -> Self {
        Self { counts: alloc::vec![0; devices * SLOTS] }
    }

    pub fn devices(&self) -> usize {
        self.counts.len() / SLOTS
    }

    pub fn get(&self, device: usize, edge: Edge, dir: Direction, phase: Phase) -> u64 {
        self.counts[device * SLOTS + slot(edge, dir, phase)]
    }

    pub fn add(&mut self, device: usize, edge: Edge, dir: Direction, phase: Phase, bytes: u64) {
        self.counts[device * SLOTS + slot(edge, dir, phase)] += bytes;
    }

    pub fn total(&self, edge: Edge, dir: Direction) -> u64 {
        (0..self.devices()).map(|d| self.device_total(d, edge, dir)).sum()
    }

    pub fn device_total(&self, device: usize, edge: Edge, dir: Direction) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(device, edge, dir, p)).sum()
    }

    pub fn phase_total(&self, edge: Edge, dir: Direction, phase: Phase) -> u64 {
        (0..self.devices()).map(|d| self.get(d, edge, dir, phase)).sum()
    }

    /// `self - earlier`, counter by counter.
    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        assert_eq!(self.counts.len(), earlier.counts.len());
        TrafficSnapshot { counts: self.counts.iter().zip(&earlier.counts).map(|(a, b)| a - b).collect() }
    }
}

/// Concurrent ledger. Each recorded transfer touches exactly one counter.
#[derive(Debug)]
pub struct TrafficLedger {
    counts: Vec<AtomicU64>,
}

impl TrafficLedger {
    pub fn new(devices: usize) -> Self {
        Self { counts: (0..devices * SLOTS).map(|_| AtomicU64::new(0)).collect() }
    }

    pub fn devices(&self) -> usize {
        self.counts.len() / SLOTS
    }

    pub fn record(&self, device: usize, edge: Edge, dir: Direction, phase: Phase, bytes: u64) {
        self.counts[device * SLOTS + slot(edge, dir, phase)].fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot { counts: self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect() }
    }
}

//! Functional storage fabric: file-backed devices, the two kinds of transfer
//! edges and the traffic ledger that counts every byte crossing them.
//!
//! Bandwidth is not enforced here; timing belongs to the simulator.

use std::path::Path;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use nearstore_core::layout::{raid0_map, Extent};
use nearstore_core::ledger::{Direction, Edge, Phase, TrafficLedger};
use nearstore_core::topology::FabricTopology;
use nearstore_core::trace::Priority;

use crate::error::{Error, Result};
use crate::store::ShardStore;

/// Holds low-priority writes back while normal-priority transfers are in flight
/// on the same device.
#[derive(Debug, Default)]
struct PriorityGate {
    pending: Mutex<usize>,
    idle: Condvar,
}

impl PriorityGate {
    fn enter_normal(&self) {
        *self.pending.lock().unwrap() += 1;
    }

    fn leave_normal(&self) {
        let mut p = self.pending.lock().unwrap();
        *p -= 1;
        if *p == 0 {
            self.idle.notify_all();
        }
    }

    fn wait_idle(&self) {
        let mut p = self.pending.lock().unwrap();
        while *p > 0 {
            p = self.idle.wait(p).unwrap();
        }
    }
}

#[derive(Debug)]
pub struct Fabric {
    topology: FabricTopology,
    stores: Vec<ShardStore>,
    ledger: Arc<TrafficLedger>,
    phase: AtomicU8,
    gates: Vec<PriorityGate>,
}

/// Restores the previous phase attribution on drop.
pub struct PhaseGuard<'a> {
    fabric: &'a Fabric,
    previous: Phase,
}

impl Drop for PhaseGuard<'_> {
    fn drop(&mut self) {
        self.fabric.phase.store(self.previous.index() as u8, Ordering::SeqCst);
    }
}

impl Fabric {
    /// One backing file per device under `dir`, each limited to `capacities[d]` bytes.
    pub fn create(topology: FabricTopology, dir: &Path, capacities: &[u64]) -> Result<Self> {
        topology.validate()?;
        if capacities.len() != topology.devices.len() {
            return Err(Error::Config(format!(
                "{} capacities given for {} devices",
                capacities.len(),
                topology.devices.len()
            )));
        }
        let stores = capacities.iter().enumerate().map(|(d, &c)| ShardStore::create(dir, d, c)).collect::<Result<Vec<_>>>()?;
        let n = stores.len();
        Ok(Self {
            topology,
            stores,
            ledger: Arc::new(TrafficLedger::new(n)),
            phase: AtomicU8::new(Phase::Update.index() as u8),
            gates: (0..n).map(|_| PriorityGate::default()).collect(),
        })
    }

    pub fn topology(&self) -> &FabricTopology {
        &self.topology
    }

    pub fn devices(&self) -> usize {
        self.stores.len()
    }

    pub fn ledger(&self) -> &Arc<TrafficLedger> {
        &self.ledger
    }

    pub fn store(&self, device: usize) -> Result<&ShardStore> {
        self.stores.get(device).ok_or(Error::UnknownDevice(device))
    }

    pub fn phase(&self) -> Phase {
        Phase::from_index(self.phase.load(Ordering::SeqCst) as usize)
    }

    /// Attributes subsequent transfers to `phase`; returns the previous phase.
    pub fn set_phase(&self, phase: Phase) -> Phase {
        Phase::from_index(self.phase.swap(phase.index() as u8, Ordering::SeqCst) as usize)
    }

    /// Attributes transfers to `phase` until the guard drops.
    pub fn enter_phase(&self, phase: Phase) -> PhaseGuard<'_> {
        let previous = self.set_phase(phase);
        PhaseGuard { fabric: self, previous }
    }

    fn require_csd(&self, device: usize, op: &'static str) -> Result<()> {
        let desc = self.topology.devices.get(device).ok_or(Error::UnknownDevice(device))?;
        if desc.is_csd() {
            Ok(())
        } else {
            Err(Error::Unsupported { op, device })
        }
    }

    fn normal<T>(&self, device: usize, f: impl FnOnce(&ShardStore) -> Result<T>) -> Result<T> {
        let store = self.store(device)?;
        let gate = &self.gates[device];
        gate.enter_normal();
        let r = f(store);
        gate.leave_normal();
        r
    }

    fn record(&self, device: usize, edge: Edge, dir: Direction, bytes: u64) {
        self.ledger.record(device, edge, dir, self.phase(), bytes);
    }

    /// Device -> host over the shared interconnect.
    pub fn host_read(&self, device: usize, offset: u64, len: u64) -> Result<Vec<u8>> {
        let out = self.normal(device, |s| s.read_at(offset, len))?;
        self.record(device, Edge::Host, Direction::Read, len);
        Ok(out)
    }

    /// Host -> device over the shared interconnect.
    pub fn host_write(&self, device: usize, offset: u64, bytes: &[u8]) -> Result<()> {
        self.normal(device, |s| s.write_at(offset, bytes))?;
        self.record(device, Edge::Host, Direction::Write, bytes.len() as u64);
        Ok(())
    }

    /// SSD -> accelerator over the CSD's internal switch.
    pub fn p2p_read(&self, device: usize, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.require_csd(device, "p2p_read")?;
        let out = self.normal(device, |s| s.read_at(offset, len))?;
        self.record(device, Edge::Internal, Direction::Read, len);
        Ok(out)
    }

    /// Accelerator -> SSD over the CSD's internal switch. Low-priority writes
    /// wait until no normal-priority transfer is in flight on the device.
    pub fn p2p_write(&self, device: usize, offset: u64, bytes: &[u8], priority: Priority) -> Result<()> {
        self.require_csd(device, "p2p_write")?;
        match priority {
            Priority::Normal => self.normal(device, |s| s.write_at(offset, bytes))?,
            Priority::Low => {
                let store = self.store(device)?;
                self.gates[device].wait_idle();
                store.write_at(offset, bytes)?
            }
        }
        self.record(device, Edge::Internal, Direction::Write, bytes.len() as u64);
        Ok(())
    }

    /// Initial placement of data; not traffic of any iteration.
    pub fn provision(&self, device: usize, offset: u64, bytes: &[u8]) -> Result<()> {
        self.store(device)?.write_at(offset, bytes)
    }

    /// Reads without touching the ledger, for checks and reports.
    pub fn inspect(&self, device: usize, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.store(device)?.read_at(offset, len)
    }
}

/// RAID0 view over all devices of a fabric, accessed from the host.
#[derive(Debug, Clone, Copy)]
pub struct Raid0Volume {
    pub stripe: u64,
    pub devices: usize,
}

impl Raid0Volume {
    pub fn read(&self, fabric: &Fabric, extent: Extent) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(extent.len as usize);
        for (d, e) in raid0_map(extent, self.stripe, self.devices) {
            out.extend(fabric.host_read(d, e.offset, e.len)?);
        }
        Ok(out)
    }

    pub fn write(&self, fabric: &Fabric, offset: u64, bytes: &[u8]) -> Result<()> {
        let mut pos = 0usize;
        for (d, e) in raid0_map(Extent::new(offset, bytes.len() as u64), self.stripe, self.devices) {
            fabric.host_write(d, e.offset, &bytes[pos..pos + e.len as usize])?;
            pos += e.len as usize;
        }
        Ok(())
    }

    pub fn provision(&self, fabric: &Fabric, offset: u64, bytes: &[u8]) -> Result<()> {
        let mut pos = 0usize;
        for (d, e) in raid0_map(Extent::new(offset, bytes.len() as u64), self.stripe, self.devices) {
            fabric.provision(d, e.offset, &bytes[pos..pos + e.len as usize])?;
            pos += e.len as usize;
        }
        Ok(())
    }

    pub fn inspect(&self, fabric: &Fabric, extent: Extent) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(extent.len as usize);
        for (d, e) in raid0_map(extent, self.stripe, self.devices) {
            out.extend(fabric.inspect(d, e.offset, e.len)?);
        }
        Ok(out)
    }
}

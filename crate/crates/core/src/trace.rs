//! Ordered transfer/compute log of one training iteration with explicit
//! dependencies. The functional engine and the synthetic workload builder both
//! emit it; the timing model replays it.

use alloc::vec::Vec;
use core::fmt;

use crate::ledger::{Direction, Edge, Phase, TrafficSnapshot};
use crate::numerics::Variable;

pub type OpId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// Device -> host memory over the shared interconnect.
    HostRead { device: usize },
    /// Host memory -> device over the shared interconnect.
    HostWrite { device: usize },
    /// SSD -> accelerator over the CSD's internal switch.
    P2pRead { device: usize },
    /// Accelerator -> SSD over the CSD's internal switch.
    P2pWrite { device: usize },
    AccelUpdate { device: usize },
    AccelDecompress { device: usize },
    /// Device buffer allocation or release; fixed cost.
    AccelAlloc { device: usize },
    /// Optimizer step on the host CPU.
    HostUpdate,
    /// Forward/backward compute with a fixed duration.
    Gpu { seconds: f64 },
    /// Zero-cost synchronisation point.
    Barrier,
}

impl OpKind {
    pub fn device(&self) -> Option<usize> {
        match *self {
            OpKind::HostRead { device }
            | OpKind::HostWrite { device }
            | OpKind::P2pRead { device }
            | OpKind::P2pWrite { device }
            | OpKind::AccelUpdate { device }
            | OpKind::AccelDecompress { device }
            | OpKind::AccelAlloc { device } => Some(device),
            _ => None,
        }
    }

    /// Ledger edge and direction if this op moves bytes across the fabric.
    pub fn edge(&self) -> Option<(Edge, Direction)> {
        match self {
            OpKind::HostRead { .. } => Some((Edge::Host, Direction::Read)),
            OpKind::HostWrite { .. } => Some((Edge::Host, Direction::Write)),
            OpKind::P2pRead { .. } => Some((Edge::Internal, Direction::Read)),
            OpKind::P2pWrite { .. } => Some((Edge::Internal, Direction::Write)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Forward,
    Backward,
    GradOffload,
    Gate,
    Alloc,
    Dealloc,
    Load(Variable),
    LoadSparse,
    Decompress,
    Update,
    Writeback(Variable),
    /// Updated parameters pulled back to host memory.
    ParamsUpload,
}

impl Role {
    pub fn is_load(&self) -> bool {
        matches!(self, Role::Load(_) | Role::Decompress)
    }

    pub fn is_state_writeback(&self) -> bool {
        matches!(self, Role::Writeback(v) if *v != Variable::Params)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Forward => f.write_str("forward"),
            Role::Backward => f.write_str("backward"),
            Role::GradOffload => f.write_str("grad_offload"),
            Role::Gate => f.write_str("gate"),
            Role::Alloc => f.write_str("alloc"),
            Role::Dealloc => f.write_str("dealloc"),
            Role::Load(v) => write!(f, "load_{}", v.name()),
            Role::LoadSparse => f.write_str("load_sparse"),
            Role::Decompress => f.write_str("decompress"),
            Role::Update => f.write_str("update"),
            Role::Writeback(v) => write!(f, "writeback_{}", v.name()),
            Role::ParamsUpload => f.write_str("params_upload"),
        }
    }
}

/// Lower value is served first on a contended resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Priority {
    #[default]
    Normal,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskletTag {
    pub device: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOp {
    pub kind: OpKind,
    pub bytes: u64,
    pub phase: Phase,
    pub role: Role,
    pub tasklet: Option<TaskletTag>,
    pub priority: Priority,
    pub deps: Vec<OpId>,
}

impl TraceOp {
    pub fn new(kind: OpKind, bytes: u64, phase: Phase, role: Role) -> Self {
        Self { kind, bytes, phase, role, tasklet: None, priority: Priority::Normal, deps: Vec::new() }
    }

    pub fn tasklet(mut self, device: usize, index: usize) -> Self {
        self.tasklet = Some(TaskletTag { device, index });
        self
    }

    pub fn low_priority(mut self) -> Self {
        self.priority = Priority::Low;
        self
    }

    pub fn after<I: IntoIterator<Item = OpId>>(mut self, deps: I) -> Self {
        self.deps.extend(deps);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub ops: Vec<TraceOp>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an op. Dependencies must name ops already in the trace, so the
    /// trace is topologically ordered by construction.
    pub fn push(&mut self, mut op: TraceOp) -> OpId {
        let id = self.ops.len();
        assert!(op.deps.iter().all(|&d| d < id), "dependency on a later op");
        op.deps.sort_unstable();
        op.deps.dedup();
        self.ops.push(op);
        id
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn device_count(&self) -> usize {
        self.ops.iter().filter_map(|o| o.kind.device()).max().map_or(0, |d| d + 1)
    }

    /// Fabric bytes by device, edge, direction and phase, in ledger form.
    pub fn traffic(&self, devices: usize) -> TrafficSnapshot {
        let mut snap = TrafficSnapshot::zeros(devices);
        for op in &self.ops {
            if let (Some((edge, dir)), Some(dev)) = (op.kind.edge(), op.kind.device()) {
                snap.add(dev, edge, dir, op.phase, op.bytes);
            }
        }
        snap
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traffic_summary() {
        let mut t = Trace::new();
        let a = t.push(TraceOp::new(OpKind::HostWrite { device: 1 }, 100, Phase::Backward, Role::GradOffload));
        t.push(TraceOp::new(OpKind::P2pRead { device: 0 }, 7, Phase::Update, Role::Load(Variable::Grad)).after([a, a]));
        t.push(TraceOp::new(OpKind::AccelUpdate { device: 0 }, 50, Phase::Update, Role::Update));
        assert_eq!(t.ops[1].deps, alloc::vec![a]);
        let s = t.traffic(t.device_count());
        assert_eq!(s.total(Edge::Host, Direction::Write), 100);
        assert_eq!(s.total(Edge::Internal, Direction::Read), 7);
        assert_eq!(s.total(Edge::Internal, Direction::Write), 0);
    }

    #[test]
    #[should_panic]
    fn forward_dependencies_rejected() {
        let mut t = Trace::new();
        t.push(TraceOp::new(OpKind::Barrier, 0, Phase::Forward, Role::Gate).after([3]));
    }
}

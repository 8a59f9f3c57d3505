//! Discrete-event timing model that replays a [`Trace`] on a [`FabricTopology`].
//!
//! Every transfer is cut into chunks that flow through a fixed chain of
//! resources (for a host read: the SSD, an optional expansion uplink, then the
//! shared host link). Each resource serves one chunk at a time, non-preemptive,
//! picking the waiting request with the best `(priority, ready time, op id,
//! chunk)`. This tandem-queue picture is what makes aggregate throughput
//! `min(sum of device bandwidths, host link bandwidth)`.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::Phase;
use crate::topology::{FabricTopology, GB};
use crate::trace::{OpKind, Priority, Role, TaskletTag, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Transfer granularity on the resource chain.
    pub chunk_bytes: u64,
    /// Fixed cost charged once per device-side op (kernel invocation, command submission).
    pub op_latency_s: f64,
    /// Cost of one device buffer allocation or release.
    pub alloc_latency_s: f64,
    /// Host CPU optimizer throughput over update input bytes.
    pub host_update_throughput: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { chunk_bytes: 64 << 20, op_latency_s: 50e-6, alloc_latency_s: 2e-3, host_update_throughput: 6.4 * GB }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Resource {
    HostLink,
    Uplink(usize),
    DeviceIo(usize),
    Internal(usize),
    Accel(usize),
    HostCpu,
    Gpu,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::HostLink => f.write_str("host_link"),
            Resource::Uplink(g) => write!(f, "uplink{g}"),
            Resource::DeviceIo(d) => write!(f, "dev{d}_io"),
            Resource::Internal(d) => write!(f, "dev{d}_internal"),
            Resource::Accel(d) => write!(f, "dev{d}_accel"),
            Resource::HostCpu => f.write_str("host_cpu"),
            Resource::Gpu => f.write_str("gpu"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cost {
    /// bytes/s
    Rate(f64),
    /// seconds per op
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEvent {
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub bytes: u64,
    pub phase: Phase,
    pub op: usize,
    pub role: Role,
    pub tasklet: Option<TaskletTag>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    /// `(start, end)` per trace op.
    pub op_spans: Vec<(f64, f64)>,
    pub phases: Vec<Phase>,
    pub makespan: f64,
}

impl Timeline {
    /// Span of all ops matching `pred`, or `None` if none match.
    pub fn span_of(&self, mut pred: impl FnMut(usize) -> bool) -> Option<(f64, f64)> {
        self.op_spans.iter().enumerate().filter(|(i, _)| pred(*i)).fold(None, |acc, (_, &(s, e))| match acc {
            None => Some((s, e)),
            Some((a, b)) => Some((a.min(s), b.max(e))),
        })
    }

    pub fn busy_time(&self, resource: Resource) -> f64 {
        self.events.iter().filter(|e| e.resource == resource).map(|e| e.end - e.start).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Request {
    priority: Priority,
    ready: u64,
    op: usize,
    chunk: u32,
    stage: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    StageDone { res: usize, op: usize, chunk: u32, stage: u8 },
}

struct OpPlan {
    stages: Vec<(usize, Cost)>,
    chunks: Vec<u64>,
    latency: f64,
}

/// Non-negative finite times order like their bit patterns.
fn key(t: f64) -> u64 {
    debug_assert!(t >= 0.0 && t.is_finite());
    t.to_bits()
}

fn time(k: u64) -> f64 {
    f64::from_bits(k)
}

pub fn simulate(trace: &Trace, topo: &FabricTopology, cfg: &SimConfig) -> Result<Timeline> {
    if cfg.chunk_bytes == 0 || !(cfg.host_update_throughput > 0.0) {
        return Err(Error::Config("chunk size and host update throughput must be positive".into()));
    }
    let mut resources: BTreeMap<Resource, usize> = BTreeMap::new();
    let mut res_names: Vec<Resource> = Vec::new();
    let mut res_id = |r: Resource| -> usize {
        *resources.entry(r).or_insert_with(|| {
            res_names.push(r);
            res_names.len() - 1
        })
    };

    let mut plans = Vec::with_capacity(trace.len());
    for (i, op) in trace.ops.iter().enumerate() {
        let dev = |d: usize, needs_csd: bool| {
            let desc = topo.devices.get(d).ok_or_else(|| Error::UnknownResource {
                op: i,
                what: format!("device {d} (topology has {})", topo.devices.len()),
            })?;
            if needs_csd && !desc.is_csd() {
                return Err(Error::UnknownResource { op: i, what: format!("device {d} is a plain SSD without accelerator") });
            }
            Ok(desc)
        };
        let uplink = |d: usize| topo.expansion_group_of(d).map(|g| (Resource::Uplink(g), Cost::Rate(topo.expansion[g].uplink_bw)));
        let mut stages: Vec<(Resource, Cost)> = Vec::new();
        let mut chunked = false;
        let mut latency = cfg.op_latency_s;
        match op.kind {
            OpKind::HostRead { device } => {
                let desc = dev(device, false)?;
                stages.push((Resource::DeviceIo(device), Cost::Rate(desc.read_bw)));
                stages.extend(uplink(device));
                stages.push((Resource::HostLink, Cost::Rate(topo.host_link_bw)));
                chunked = true;
            }
            OpKind::HostWrite { device } => {
                let desc = dev(device, false)?;
                stages.push((Resource::HostLink, Cost::Rate(topo.host_link_bw)));
                stages.extend(uplink(device));
                stages.push((Resource::DeviceIo(device), Cost::Rate(desc.write_bw)));
                chunked = true;
            }
            OpKind::P2pRead { device } => {
                let desc = dev(device, true)?;
                stages.push((Resource::DeviceIo(device), Cost::Rate(desc.read_bw)));
                stages.push((Resource::Internal(device), Cost::Rate(desc.internal_link_bw)));
                chunked = true;
            }
            OpKind::P2pWrite { device } => {
                let desc = dev(device, true)?;
                stages.push((Resource::Internal(device), Cost::Rate(desc.internal_link_bw)));
                stages.push((Resource::DeviceIo(device), Cost::Rate(desc.write_bw)));
                chunked = true;
            }
            OpKind::AccelUpdate { device } => {
                let desc = dev(device, true)?;
                stages.push((Resource::Accel(device), Cost::Rate(desc.accel_update_throughput)));
            }
            OpKind::AccelDecompress { device } => {
                let desc = dev(device, true)?;
                stages.push((Resource::Accel(device), Cost::Rate(desc.accel_decomp_throughput)));
            }
            OpKind::AccelAlloc { device } => {
                dev(device, true)?;
                stages.push((Resource::Accel(device), Cost::Fixed(cfg.alloc_latency_s)));
                latency = 0.0;
            }
            OpKind::HostUpdate => {
                stages.push((Resource::HostCpu, Cost::Rate(cfg.host_update_throughput)));
                latency = 0.0;
            }
            OpKind::Gpu { seconds } => {
                if !(seconds >= 0.0 && seconds.is_finite()) {
                    return Err(Error::InvalidArgument(format!("op {i}: compute time {seconds} is not a duration")));
                }
                stages.push((Resource::Gpu, Cost::Fixed(seconds)));
                latency = 0.0;
            }
            OpKind::Barrier => latency = 0.0,
        }
        let chunks = if stages.is_empty() {
            Vec::new()
        } else if chunked && op.bytes > cfg.chunk_bytes {
            let full = op.bytes / cfg.chunk_bytes;
            let mut c = vec![cfg.chunk_bytes; full as usize];
            if op.bytes % cfg.chunk_bytes != 0 {
                c.push(op.bytes % cfg.chunk_bytes);
            }
            c
        } else {
            vec![op.bytes]
        };
        plans.push(OpPlan { stages: stages.into_iter().map(|(r, c)| (res_id(r), c)).collect(), chunks, latency });
    }

    let n_ops = trace.len();
    let mut indegree: Vec<usize> = trace.ops.iter().map(|o| o.deps.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n_ops];
    for (i, op) in trace.ops.iter().enumerate() {
        for &d in &op.deps {
            dependents[d].push(i);
        }
    }

    let mut busy = vec![false; res_names.len()];
    let mut queues: Vec<BinaryHeap<Reverse<Request>>> = (0..res_names.len()).map(|_| BinaryHeap::new()).collect();
    let mut events: BinaryHeap<Reverse<(u64, u64, Event)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut remaining: Vec<usize> = plans.iter().map(|p| p.chunks.len()).collect();
    let mut spans = vec![(f64::INFINITY, 0.0f64); n_ops];
    let mut done = vec![false; n_ops];
    let mut timeline_events = Vec::new();

    struct Ctx<'a> {
        trace: &'a Trace,
        plans: &'a [OpPlan],
        busy: &'a mut [bool],
        queues: &'a mut [BinaryHeap<Reverse<Request>>],
        events: &'a mut BinaryHeap<Reverse<(u64, u64, Event)>>,
        seq: &'a mut u64,
        spans: &'a mut [(f64, f64)],
        out: &'a mut Vec<TimelineEvent>,
        names: &'a [Resource],
    }

    impl Ctx<'_> {
        fn try_start(&mut self, res: usize, now: f64) {
            if self.busy[res] {
                return;
            }
            let Some(Reverse(req)) = self.queues[res].pop() else { return };
            let plan = &self.plans[req.op];
            let bytes = plan.chunks[req.chunk as usize];
            let mut dur = match plan.stages[req.stage as usize].1 {
                Cost::Rate(r) => bytes as f64 / r,
                Cost::Fixed(s) => s,
            };
            if req.chunk == 0 && req.stage == 0 {
                dur += plan.latency;
            }
            let end = now + dur;
            self.busy[res] = true;
            let op = &self.trace.ops[req.op];
            self.spans[req.op].0 = self.spans[req.op].0.min(now);
            self.out.push(TimelineEvent {
                resource: self.names[res],
                start: now,
                end,
                bytes,
                phase: op.phase,
                op: req.op,
                role: op.role,
                tasklet: op.tasklet,
            });
            *self.seq += 1;
            self.events.push(Reverse((key(end), *self.seq, Event::StageDone { res, op: req.op, chunk: req.chunk, stage: req.stage })));
        }

        fn enqueue(&mut self, op: usize, chunk: u32, stage: u8, now: f64) {
            let res = self.plans[op].stages[stage as usize].0;
            let priority = self.trace.ops[op].priority;
            self.queues[res].push(Reverse(Request { priority, ready: key(now), op, chunk, stage }));
            self.try_start(res, now);
        }
    }

    let mut ready_stack: Vec<(usize, f64)> = (0..n_ops).filter(|&i| indegree[i] == 0).map(|i| (i, 0.0)).collect();
    ready_stack.reverse();
    let mut now = 0.0f64;
    loop {
        // Release ops that became ready; completions of stage-less ops cascade here.
        while let Some((op, t)) = ready_stack.pop() {
            let mut ctx = Ctx {
                trace,
                plans: &plans,
                busy: &mut busy,
                queues: &mut queues,
                events: &mut events,
                seq: &mut seq,
                spans: &mut spans,
                out: &mut timeline_events,
                names: &res_names,
            };
            if plans[op].chunks.is_empty() {
                ctx.spans[op] = (t, t);
                done[op] = true;
                let mut newly: Vec<(usize, f64)> = Vec::new();
                for &dep in &dependents[op] {
                    indegree[dep] -= 1;
                    if indegree[dep] == 0 {
                        newly.push((dep, t));
                    }
                }
                newly.reverse();
                ready_stack.extend(newly);
            } else {
                for c in 0..plans[op].chunks.len() as u32 {
                    ctx.enqueue(op, c, 0, t);
                }
            }
        }
        let Some(Reverse((tk, _, ev))) = events.pop() else { break };
        now = time(tk);
        let Event::StageDone { res, op, chunk, stage } = ev;
        busy[res] = false;
        let mut ctx = Ctx {
            trace,
            plans: &plans,
            busy: &mut busy,
            queues: &mut queues,
            events: &mut events,
            seq: &mut seq,
            spans: &mut spans,
            out: &mut timeline_events,
            names: &res_names,
        };
        if (stage as usize) + 1 < plans[op].stages.len() {
            ctx.enqueue(op, chunk, stage + 1, now);
        } else {
            remaining[op] -= 1;
            if remaining[op] == 0 {
                ctx.spans[op].1 = now;
                done[op] = true;
                let mut newly = Vec::new();
                for &dep in &dependents[op] {
                    indegree[dep] -= 1;
                    if indegree[dep] == 0 {
                        newly.push((dep, now));
                    }
                }
                newly.reverse();
                ready_stack.extend(newly);
            }
        }
        ctx.try_start(res, now);
    }

    debug_assert!(done.iter().all(|&d| d));
    let makespan = spans.iter().map(|s| s.1).fold(0.0, f64::max);
    let _ = now;
    Ok(Timeline {
        events: timeline_events,
        op_spans: spans,
        phases: trace.ops.iter().map(|o| o.phase).collect(),
        makespan,
    })
}

/// Wall time per phase plus the whole iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Breakdown {
    pub forward: f64,
    pub backward: f64,
    pub update: f64,
    pub total: f64,
}

impl Breakdown {
    pub fn phase(&self, p: Phase) -> f64 {
        match p {
            Phase::Forward => self.forward,
            Phase::Backward => self.backward,
            Phase::Update => self.update,
        }
    }

    pub fn fraction(&self, p: Phase) -> f64 {
        if self.total > 0.0 {
            self.phase(p) / self.total
        } else {
            0.0
        }
    }

    /// How much faster `self` is than `other`.
    pub fn speedup_over(&self, other: &Breakdown) -> f64 {
        other.total / self.total
    }
}

/// Phase wall time is the makespan of the phase's ops.
pub fn summarize(timeline: &Timeline) -> Breakdown {
    let span = |p: Phase| timeline.span_of(|i| timeline.phases[i] == p).map_or(0.0, |(s, e)| e - s);
    Breakdown {
        forward: span(Phase::Forward),
        backward: span(Phase::Backward),
        update: span(Phase::Update),
        total: timeline.makespan,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::DeviceDesc;
    use crate::trace::TraceOp;

    fn topo(n: usize) -> FabricTopology {
        FabricTopology::uniform(DeviceDesc::csd(), n)
    }

    fn no_latency() -> SimConfig {
        SimConfig { op_latency_s: 0.0, ..SimConfig::default() }
    }

    #[test]
    fn host_link_definition() {
        // One 16 GB transfer on a 16 GB/s link with a faster device is 1 s.
        let mut t = Trace::new();
        t.push(TraceOp::new(OpKind::HostWrite { device: 0 }, 16_000_000_000, Phase::Update, Role::GradOffload));
        let mut tp = topo(1);
        tp.devices[0].write_bw = 1e15;
        let cfg = SimConfig { chunk_bytes: 16_000_000, ..no_latency() };
        let tl = simulate(&t, &tp, &cfg).unwrap();
        // plus the last chunk's device stage
        assert!((tl.makespan - 1.0).abs() < 1e-6, "{}", tl.makespan);
    }

    #[test]
    fn empty_trace_is_zero() {
        let tl = simulate(&Trace::new(), &topo(1), &SimConfig::default()).unwrap();
        assert_eq!(summarize(&tl), Breakdown::default());
    }

    #[test]
    fn ssd_has_no_internal_path() {
        let mut t = Trace::new();
        t.push(TraceOp::new(OpKind::P2pRead { device: 0 }, 10, Phase::Update, Role::LoadSparse));
        let tp = FabricTopology::uniform(DeviceDesc::ssd(), 1);
        assert!(matches!(simulate(&t, &tp, &SimConfig::default()), Err(Error::UnknownResource { .. })));
        let mut t = Trace::new();
        t.push(TraceOp::new(OpKind::HostRead { device: 3 }, 10, Phase::Update, Role::LoadSparse));
        assert!(simulate(&t, &tp, &SimConfig::default()).is_err());
    }

    #[test]
    fn dependencies_serialize_and_priority_orders() {
        let mut t = Trace::new();
        let a = t.push(TraceOp::new(OpKind::Gpu { seconds: 1.0 }, 0, Phase::Forward, Role::Forward));
        let w = crate::numerics::Variable::Variance;
        t.push(TraceOp::new(OpKind::P2pWrite { device: 0 }, 3_200_000_000, Phase::Update, Role::Writeback(w)).after([a]));
        let gate = t.push(TraceOp::new(OpKind::Gpu { seconds: 0.5 }, 0, Phase::Backward, Role::Backward).after([a]));
        // Both queue behind the write above; low priority comes first in trace order.
        let low = t.push(
            TraceOp::new(OpKind::P2pWrite { device: 0 }, 3_200_000_000, Phase::Update, Role::Writeback(crate::numerics::Variable::Momentum))
                .low_priority()
                .after([gate]),
        );
        let hi = t.push(
            TraceOp::new(OpKind::P2pWrite { device: 0 }, 3_200_000_000, Phase::Update, Role::Writeback(crate::numerics::Variable::Params))
                .after([gate]),
        );
        let cfg = SimConfig { chunk_bytes: 1 << 40, ..no_latency() };
        // only the 3.2 GB/s internal stage matters
        let mut tp = topo(1);
        tp.devices[0].write_bw = 1e18;
        let tl = simulate(&t, &tp, &cfg).unwrap();
        assert_eq!(tl.op_spans[gate], (1.0, 1.5));
        assert!((tl.op_spans[hi].0 - 2.0).abs() < 1e-6);
        assert!((tl.op_spans[low].0 - 3.0).abs() < 1e-6);
        let b = summarize(&tl);
        assert!((b.forward - 1.0).abs() < 1e-12);
        assert!((b.update - 3.0).abs() < 1e-6);
        assert!((b.total - 4.0).abs() < 1e-6);
    }

    #[test]
    fn resources_never_overlap() {
        let mut t = Trace::new();
        for d in 0..3 {
            t.push(TraceOp::new(OpKind::HostRead { device: d }, 1 << 30, Phase::Update, Role::ParamsUpload));
            t.push(TraceOp::new(OpKind::P2pRead { device: d }, 1 << 29, Phase::Update, Role::LoadSparse));
        }
        let cfg = SimConfig { chunk_bytes: 1 << 26, ..SimConfig::default() };
        let tl = simulate(&t, &topo(3), &cfg).unwrap();
        let mut by_res: BTreeMap<Resource, Vec<(f64, f64)>> = BTreeMap::new();
        for e in &tl.events {
            assert!(e.end >= e.start);
            by_res.entry(e.resource).or_default().push((e.start, e.end));
        }
        for (_, mut v) in by_res {
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in v.windows(2) {
                assert!(w[1].0 >= w[0].1 - 1e-12);
            }
        }
    }
}

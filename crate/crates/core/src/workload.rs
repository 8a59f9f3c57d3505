//! Training modes, on-device layouts and the per-iteration trace builder.
//!
//! The builder encodes the dataflow of each mode: forward and backward compute
//! per model block, gradient offload during backward, a gate over all
//! gradients, then either a host-side update against a RAID0 volume or a
//! per-device near-storage update run as tasklets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compression::{k_for_budget, wire_payload, HEADER_LEN};
use crate::error::{Error, Result};
use crate::layout::{partition_parameters, plan_subgroups, raid0_map, Extent, Partition, Tasklet};
use crate::ledger::Phase;
use crate::numerics::{OptimizerKind, Variable};
use crate::trace::{OpId, OpKind, Role, Trace, TraceOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Everything in host memory; the reference for equivalence checks.
    InMemory,
    /// Host CPU update with optimizer states on a RAID0 volume.
    Base,
    /// Near-storage update, one tasklet at a time.
    Su,
    /// Near-storage update with the overlapped transfer handler.
    SuO,
    /// As `SuO`, with Top-K compressed gradient offload.
    SuOC,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::InMemory, Mode::Base, Mode::Su, Mode::SuO, Mode::SuOC];

    pub fn near_storage(self) -> bool {
        matches!(self, Mode::Su | Mode::SuO | Mode::SuOC)
    }

    pub fn overlapped(self) -> bool {
        matches!(self, Mode::SuO | Mode::SuOC)
    }

    pub fn compressed(self) -> bool {
        self == Mode::SuOC
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::InMemory => "in_memory",
            Mode::Base => "base",
            Mode::Su => "su",
            Mode::SuO => "su_o",
            Mode::SuOC => "su_o_c",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected one of in_memory, base, su, su_o, su_o_c")))
    }
}

/// Everything about one iteration that determines its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadShape {
    pub mode: Mode,
    pub optimizer: OptimizerKind,
    /// Element counts of the model blocks, in flattened order.
    pub blocks: Vec<u64>,
    pub devices: usize,
    pub accel_mem_capacity: u64,
    /// Granularity of the host-side update pipeline.
    pub host_subgroup_elems: u64,
    pub stripe_bytes: u64,
    pub compression_pct: Option<f64>,
    /// Per-block compute seconds.
    pub forward_s: Vec<f64>,
    pub backward_s: Vec<f64>,
}

impl WorkloadShape {
    pub fn param_count(&self) -> u64 {
        self.blocks.iter().sum()
    }

    pub fn block_ranges(&self) -> Vec<Extent> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|&len| {
                let e = Extent::new(off, len);
                off += len;
                e
            })
            .collect()
    }

    pub fn partition(&self) -> Partition {
        partition_parameters(self.param_count(), self.devices)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::Config("at least one device is required".into()));
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(Error::Config("model blocks must be non-empty".into()));
        }
        if self.forward_s.len() != self.blocks.len() || self.backward_s.len() != self.blocks.len() {
            return Err(Error::Config("compute times must be given per block".into()));
        }
        if self.forward_s.iter().chain(&self.backward_s).any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("compute times must be non-negative".into()));
        }
        if self.stripe_bytes == 0 || self.host_subgroup_elems == 0 {
            return Err(Error::Config("stripe size and host subgroup size must be positive".into()));
        }
        match (self.mode.compressed(), self.compression_pct) {
            (true, None) => return Err(Error::Config("compressed mode needs a compression ratio".into())),
            (true, Some(c)) if !(c > 0.0 && c <= 100.0) => {
                return Err(Error::Config(format!("compression ratio must lie in (0, 100], got {c}")))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Variables persisted for a mode, in on-device order.
pub fn stored_variables(mode: Mode, kind: OptimizerKind) -> Vec<Variable> {
    let mut vars: Vec<Variable> = kind.state_variables().to_vec();
    if !mode.compressed() {
        vars.push(Variable::Grad);
    }
    vars
}

/// The baseline's RAID0 volume: one fp32 region per variable, back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeLayout {
    pub params: u64,
    pub vars: Vec<Variable>,
}

impl VolumeLayout {
    pub fn new(params: u64, kind: OptimizerKind) -> Self {
        Self { params, vars: stored_variables(Mode::Base, kind) }
    }

    pub fn len(&self) -> u64 {
        self.vars.len() as u64 * 4 * self.params
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Byte extent of `elements` of `var` in volume coordinates.
    pub fn extent(&self, var: Variable, elements: Extent) -> Extent {
        let idx = self.vars.iter().position(|&v| v == var).expect("variable not stored on the volume") as u64;
        Extent::new(idx * 4 * self.params + elements.offset * 4, elements.len * 4)
    }
}

/// One compressed gradient record on a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordSpec {
    pub block: usize,
    pub global: Extent,
    /// Element offset inside the device's segment.
    pub local_offset: u64,
    pub k: u64,
    /// Byte extent on the device.
    pub extent: Extent,
}

/// A device's file layout in near-storage modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceLayout {
    pub device: usize,
    pub segment: Extent,
    pub vars: Vec<Variable>,
    pub records: Vec<RecordSpec>,
}

impl DeviceLayout {
    pub fn extent(&self, var: Variable, local: Extent) -> Extent {
        let idx = self.vars.iter().position(|&v| v == var).expect("variable not stored on the device") as u64;
        Extent::new(idx * 4 * self.segment.len + local.offset * 4, local.len * 4)
    }

    pub fn len(&self) -> u64 {
        self.records.last().map_or(self.vars.len() as u64 * 4 * self.segment.len, |r| r.extent.end())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sparse_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.extent.len).sum()
    }
}

pub fn record_bytes(k: u64) -> u64 {
    HEADER_LEN as u64 + wire_payload(k as usize) as u64
}

pub fn device_layouts(shape: &WorkloadShape) -> Result<Vec<DeviceLayout>> {
    let pct = shape.compression_pct.unwrap_or(100.0);
    device_layouts_with(shape, &|len| k_for_budget(len as usize, pct) as u64)
}

/// As [`device_layouts`], with the kept-entry count of each record chosen by
/// `k_for(piece_len)`.
pub fn device_layouts_with(shape: &WorkloadShape, k_for: &dyn Fn(u64) -> u64) -> Result<Vec<DeviceLayout>> {
    let partition = shape.partition();
    let vars = stored_variables(shape.mode, shape.optimizer);
    let mut layouts: Vec<DeviceLayout> = partition
        .segments
        .iter()
        .map(|&(device, segment)| DeviceLayout { device, segment, vars: vars.clone(), records: Vec::new() })
        .collect();
    if shape.mode.compressed() {
        for (block, range) in shape.block_ranges().into_iter().enumerate() {
            for piece in partition.split(range)? {
                let layout = &mut layouts[piece.device];
                let k = k_for(piece.global.len).clamp(1, piece.global.len);
                let start = layout.len();
                layout.records.push(RecordSpec {
                    block,
                    global: piece.global,
                    local_offset: piece.local_offset,
                    k,
                    extent: Extent::new(start, record_bytes(k)),
                });
            }
        }
    }
    Ok(layouts)
}

/// `(device, bytes)` per device for a volume extent, in device order.
fn raid_bytes_per_device(extent: Extent, stripe: u64, devices: usize) -> Vec<(usize, u64)> {
    let mut per: BTreeMap<usize, u64> = BTreeMap::new();
    for (d, e) in raid0_map(extent, stripe, devices) {
        *per.entry(d).or_default() += e.len;
    }
    per.into_iter().collect()
}

/// Builds the trace of one non-skipped iteration.
pub fn build_iteration(shape: &WorkloadShape) -> Result<Trace> {
    shape.validate()?;
    let mut t = Trace::new();
    let ranges = shape.block_ranges();
    let partition = shape.partition();
    let layouts = if shape.mode.near_storage() { device_layouts(shape)? } else { Vec::new() };

    let mut prev: Option<OpId> = None;
    for &s in &shape.forward_s {
        prev = Some(t.push(TraceOp::new(OpKind::Gpu { seconds: s }, 0, Phase::Forward, Role::Forward).after(prev)));
    }

    let mut offloads = Vec::new();
    for b in (0..ranges.len()).rev() {
        let bw = t.push(TraceOp::new(OpKind::Gpu { seconds: shape.backward_s[b] }, 0, Phase::Backward, Role::Backward).after(prev));
        prev = Some(bw);
        for (device, bytes) in grad_offload_bytes(shape, &partition, &layouts, b, ranges[b])? {
            offloads.push(t.push(
                TraceOp::new(OpKind::HostWrite { device }, bytes, Phase::Backward, Role::GradOffload).after([bw]),
            ));
        }
    }
    let gate = t.push(TraceOp::new(OpKind::Barrier, 0, Phase::Backward, Role::Gate).after(prev).after(offloads));

    match shape.mode {
        Mode::InMemory => {
            let bytes = shape.param_count() * shape.optimizer.update_bytes_per_element();
            t.push(TraceOp::new(OpKind::HostUpdate, bytes, Phase::Update, Role::Update).after([gate]));
        }
        Mode::Base => build_host_update(&mut t, shape, gate),
        _ => {
            for layout in &layouts {
                build_device_update(&mut t, shape, layout, gate)?;
            }
        }
    }
    Ok(t)
}

/// Per-device gradient bytes written for one block during backward.
pub fn grad_offload_bytes(
    shape: &WorkloadShape,
    partition: &Partition,
    layouts: &[DeviceLayout],
    block: usize,
    range: Extent,
) -> Result<Vec<(usize, u64)>> {
    Ok(match shape.mode {
        Mode::InMemory => Vec::new(),
        Mode::Base => {
            let vol = VolumeLayout::new(shape.param_count(), shape.optimizer);
            raid_bytes_per_device(vol.extent(Variable::Grad, range), shape.stripe_bytes, shape.devices)
        }
        Mode::Su | Mode::SuO => partition.split(range)?.into_iter().map(|p| (p.device, p.global.len * 4)).collect(),
        Mode::SuOC => {
            let mut out = Vec::new();
            for l in layouts {
                for r in l.records.iter().filter(|r| r.block == block) {
                    out.push((l.device, r.extent.len));
                }
            }
            out
        }
    })
}

/// Consecutive runs of `size` elements (the last may be shorter) covering `[0, n)`.
pub fn host_subgroups(n: u64, size: u64) -> Vec<Extent> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < n {
        let len = size.min(n - off);
        out.push(Extent::new(off, len));
        off += len;
    }
    out
}

fn build_host_update(t: &mut Trace, shape: &WorkloadShape, gate: OpId) {
    let vol = VolumeLayout::new(shape.param_count(), shape.optimizer);
    let states = shape.optimizer.state_variables();
    let mut updates: Vec<OpId> = Vec::new();
    let mut prev_reads: Vec<OpId> = Vec::new();
    for (i, sub) in host_subgroups(shape.param_count(), shape.host_subgroup_elems).into_iter().enumerate() {
        // At most two subgroups are resident in host memory.
        let mut deps = vec![gate];
        deps.extend(&prev_reads);
        if i >= 2 {
            deps.push(updates[i - 2]);
        }
        let mut reads = Vec::new();
        for &var in states.iter().chain([Variable::Grad].iter()) {
            for (device, bytes) in raid_bytes_per_device(vol.extent(var, sub), shape.stripe_bytes, shape.devices) {
                reads.push(t.push(
                    TraceOp::new(OpKind::HostRead { device }, bytes, Phase::Update, Role::Load(var)).after(deps.iter().copied()),
                ));
            }
        }
        let bytes = sub.len * shape.optimizer.update_bytes_per_element();
        let upd = t.push(
            TraceOp::new(OpKind::HostUpdate, bytes, Phase::Update, Role::Update)
                .after(reads.iter().copied())
                .after(updates.last().copied()),
        );
        for &var in states {
            for (device, bytes) in raid_bytes_per_device(vol.extent(var, sub), shape.stripe_bytes, shape.devices) {
                t.push(TraceOp::new(OpKind::HostWrite { device }, bytes, Phase::Update, Role::Writeback(var)).after([upd]));
            }
        }
        updates.push(upd);
        prev_reads = reads;
    }
}

/// Compressed entries assumed to land in `local` when decompressing, spread
/// evenly over each record's range.
fn sparse_entries_in(layout: &DeviceLayout, local: Extent) -> u64 {
    layout
        .records
        .iter()
        .filter_map(|r| {
            let rec_local = Extent::new(r.local_offset, r.global.len);
            rec_local.intersect(&local).map(|o| r.k * o.len / r.global.len)
        })
        .sum()
}

pub fn device_tasklets(shape: &WorkloadShape, layout: &DeviceLayout) -> Result<Vec<Tasklet>> {
    plan_subgroups(layout.segment.len, shape.accel_mem_capacity, shape.optimizer)
}

fn build_device_update(t: &mut Trace, shape: &WorkloadShape, layout: &DeviceLayout, gate: OpId) -> Result<()> {
    let d = layout.device;
    let kind = shape.optimizer;
    let tasklets = device_tasklets(shape, layout)?;
    if tasklets.is_empty() {
        return Ok(());
    }
    let states = kind.state_variables();
    let phase = Phase::Update;

    let mut start = vec![gate];
    if shape.mode.compressed() && !layout.records.is_empty() {
        start.push(t.push(
            TraceOp::new(OpKind::P2pRead { device: d }, layout.sparse_bytes(), phase, Role::LoadSparse).after([gate]),
        ));
    }

    let push_grad_load = |t: &mut Trace, task: &Tasklet, deps: &[OpId]| -> OpId {
        let op = if shape.mode.compressed() {
            let bytes = wire_payload(sparse_entries_in(layout, task.range) as usize) as u64;
            TraceOp::new(OpKind::AccelDecompress { device: d }, bytes, phase, Role::Decompress)
        } else {
            TraceOp::new(OpKind::P2pRead { device: d }, task.range.len * 4, phase, Role::Load(Variable::Grad))
        };
        t.push(op.tasklet(d, task.index).after(deps.iter().copied()))
    };

    if shape.mode.overlapped() {
        let pool = tasklets.iter().map(|x| x.footprint_bytes(kind)).max().unwrap_or(0);
        let alloc = t.push(TraceOp::new(OpKind::AccelAlloc { device: d }, pool, phase, Role::Alloc).after(start));
        let mut last_wb: BTreeMap<Variable, OpId> = BTreeMap::new();
        let mut last_update: Option<OpId> = None;
        for task in &tasklets {
            let bytes = task.range.len * 4;
            let mut loads = Vec::new();
            let load_state = |t: &mut Trace, var: Variable, last_wb: &BTreeMap<Variable, OpId>| {
                t.push(
                    TraceOp::new(OpKind::P2pRead { device: d }, bytes, phase, Role::Load(var))
                        .tasklet(d, task.index)
                        .after([alloc])
                        .after(last_wb.get(&var).copied()),
                )
            };
            loads.push(load_state(t, Variable::Params, &last_wb));
            let mut gdeps = vec![alloc];
            gdeps.extend(last_update);
            loads.push(push_grad_load(t, task, &gdeps));
            for &var in &states[1..] {
                loads.push(load_state(t, var, &last_wb));
            }
            let upd = t.push(
                TraceOp::new(OpKind::AccelUpdate { device: d }, task.footprint_bytes(kind), phase, Role::Update)
                    .tasklet(d, task.index)
                    .after(loads),
            );
            let pwb = t.push(
                TraceOp::new(OpKind::P2pWrite { device: d }, bytes, phase, Role::Writeback(Variable::Params))
                    .tasklet(d, task.index)
                    .after([upd]),
            );
            t.push(TraceOp::new(OpKind::HostRead { device: d }, bytes, phase, Role::ParamsUpload).tasklet(d, task.index).after([pwb]));
            last_wb.insert(Variable::Params, pwb);
            for &var in &states[1..] {
                let wb = t.push(
                    TraceOp::new(OpKind::P2pWrite { device: d }, bytes, phase, Role::Writeback(var))
                        .tasklet(d, task.index)
                        .low_priority()
                        .after([upd]),
                );
                last_wb.insert(var, wb);
            }
            last_update = Some(upd);
        }
    } else {
        let mut prev = start;
        for task in &tasklets {
            let bytes = task.range.len * 4;
            let footprint = task.footprint_bytes(kind);
            let alloc = t.push(
                TraceOp::new(OpKind::AccelAlloc { device: d }, footprint, phase, Role::Alloc).tasklet(d, task.index).after(prev),
            );
            let mut loads = vec![t.push(
                TraceOp::new(OpKind::P2pRead { device: d }, bytes, phase, Role::Load(Variable::Params))
                    .tasklet(d, task.index)
                    .after([alloc]),
            )];
            loads.push(push_grad_load(t, task, &[alloc]));
            for &var in &states[1..] {
                loads.push(t.push(
                    TraceOp::new(OpKind::P2pRead { device: d }, bytes, phase, Role::Load(var)).tasklet(d, task.index).after([alloc]),
                ));
            }
            let upd = t.push(
                TraceOp::new(OpKind::AccelUpdate { device: d }, footprint, phase, Role::Update).tasklet(d, task.index).after(loads),
            );
            let mut wbs = Vec::new();
            for &var in states {
                wbs.push(t.push(
                    TraceOp::new(OpKind::P2pWrite { device: d }, bytes, phase, Role::Writeback(var)).tasklet(d, task.index).after([upd]),
                ));
            }
            t.push(TraceOp::new(OpKind::HostRead { device: d }, bytes, phase, Role::ParamsUpload).tasklet(d, task.index).after([wbs[0]]));
            let free = t.push(
                TraceOp::new(OpKind::AccelAlloc { device: d }, footprint, phase, Role::Dealloc).tasklet(d, task.index).after(wbs),
            );
            prev = vec![free];
        }
    }
    Ok(())
}

/// Describes the compression accounting of a shape: actual record bytes next
/// to the nominal `c% x dense` figure.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionAccounting {
    pub dense_bytes: u64,
    pub record_bytes: u64,
    pub kept_elements: u64,
    pub nominal_bytes: f64,
}

impl CompressionAccounting {
    /// Record bytes as a percentage of dense fp32 gradient bytes.
    pub fn effective_pct(&self) -> f64 {
        100.0 * self.record_bytes as f64 / self.dense_bytes as f64
    }

    /// Index + value slots per dense element, in percent.
    pub fn pair_slot_pct(&self) -> f64 {
        100.0 * 2.0 * self.kept_elements as f64 / (self.dense_bytes / 4) as f64
    }
}

pub fn compression_accounting(shape: &WorkloadShape) -> Result<Option<CompressionAccounting>> {
    let Some(pct) = shape.compression_pct.filter(|_| shape.mode.compressed()) else {
        return Ok(None);
    };
    let layouts = device_layouts(shape)?;
    let dense_bytes = shape.param_count() * 4;
    Ok(Some(CompressionAccounting {
        dense_bytes,
        record_bytes: layouts.iter().map(|l| l.sparse_bytes()).sum(),
        kept_elements: layouts.iter().flat_map(|l| &l.records).map(|r| r.k).sum(),
        nominal_bytes: pct / 100.0 * dense_bytes as f64,
    }))
}

/// Human-readable one-liner for logs.
pub fn describe(shape: &WorkloadShape) -> String {
    format!(
        "{} x{} {} N={} blocks={}",
        shape.mode,
        shape.devices,
        shape.optimizer.name(),
        shape.param_count(),
        shape.blocks.len()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Direction, Edge};

    fn shape(mode: Mode, devices: usize) -> WorkloadShape {
        WorkloadShape {
            mode,
            optimizer: OptimizerKind::Adam,
            blocks: vec![600, 400, 24],
            devices,
            accel_mem_capacity: 300 * 16,
            host_subgroup_elems: 256,
            stripe_bytes: 512,
            compression_pct: mode.compressed().then_some(10.0),
            forward_s: vec![0.001; 3],
            backward_s: vec![0.002; 3],
        }
    }

    #[test]
    fn host_traffic_signatures() {
        let n = 1024u64;
        let m = 2 * n;
        for devices in [1, 3] {
            let s = build_iteration(&shape(Mode::Base, devices)).unwrap().traffic(devices);
            assert_eq!(s.total(Edge::Host, Direction::Read), 8 * m);
            assert_eq!(s.total(Edge::Host, Direction::Write), 8 * m);
            for mode in [Mode::Su, Mode::SuO] {
                let s = build_iteration(&shape(mode, devices)).unwrap().traffic(devices);
                assert_eq!(s.total(Edge::Host, Direction::Read), 2 * m);
                assert_eq!(s.total(Edge::Host, Direction::Write), 2 * m);
                assert_eq!(s.total(Edge::Internal, Direction::Read), 8 * m);
                assert_eq!(s.total(Edge::Internal, Direction::Write), 6 * m);
            }
        }
    }

    #[test]
    fn compressed_offload_matches_records() {
        let sh = shape(Mode::SuOC, 2);
        let s = build_iteration(&sh).unwrap().traffic(2);
        let acc = compression_accounting(&sh).unwrap().unwrap();
        assert_eq!(s.total(Edge::Host, Direction::Write), acc.record_bytes);
        assert!((acc.record_bytes as f64) <= acc.nominal_bytes + 6.0 * 3.0 + 22.0);
        assert_eq!(s.total(Edge::Host, Direction::Read), 4 * 1024);
    }

    #[test]
    fn overlapped_pipeline_has_one_allocation() {
        let t = build_iteration(&shape(Mode::SuO, 1)).unwrap();
        let allocs = t.ops.iter().filter(|o| o.role == Role::Alloc).count();
        assert_eq!(allocs, 1);
        let t = build_iteration(&shape(Mode::Su, 1)).unwrap();
        let allocs = t.ops.iter().filter(|o| o.role == Role::Alloc).count();
        assert_eq!(allocs, 4); // ceil(1024 / 300)
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn validation() {
        let mut s = shape(Mode::SuOC, 2);
        s.compression_pct = None;
        assert!(build_iteration(&s).is_err());
        s.compression_pct = Some(0.0);
        assert!(build_iteration(&s).is_err());
    }
}

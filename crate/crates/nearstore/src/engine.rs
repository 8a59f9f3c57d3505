//! Training engine: a real toy model trained with mixed precision while its
//! optimizer states live either in host memory, on a RAID0 volume updated by
//! the host, or on computational storage devices that update them in place.
//!
//! Each iteration runs forward, backward with per-block gradient offload to
//! the owning devices, a gate over all gradients (overflow check and global
//! norm), then the update. The per-element update is the same function in
//! every mode and every gradient reaches it as `widen(g16) / scale`, so the
//! uncompressed modes agree bit for bit.

use std::path::PathBuf;
use std::sync::Mutex;

use nearstore_core::compression::{compress_topk, k_for_budget, scatter_range, ErrorFeedback, SparseGradient};
use nearstore_core::f16;
use nearstore_core::layout::{raid0_device_len, Extent, Partition, Tasklet};
use nearstore_core::ledger::{Phase, TrafficSnapshot};
use nearstore_core::model::{Mlp, SyntheticTask};
use nearstore_core::numerics::{
    apply_update_slices, clip_scale_from_norm, narrow, unscale, widen_slice, GradChecker, LossScaleConfig, LossScaler,
    OptimizerConfig, OptimizerShard, Variable,
};
use nearstore_core::topology::FabricTopology;
use nearstore_core::trace::{Priority, Trace};
use nearstore_core::workload::{
    build_iteration, device_layouts_with, device_tasklets, host_subgroups, DeviceLayout, Mode, VolumeLayout,
    WorkloadShape,
};

use crate::error::{Error, Result};
use crate::fabric::{Fabric, Raid0Volume};
use crate::handler::{naive_pipeline, run_pipeline, BufferPool, Buffers, EventLog, LogRow, PipelineReport, Schedule, TaskletIo};
use crate::store::{bytes_to_f32, f32_to_bytes, ManifestEntry, StoredDtype};

/// How many entries each compressed record keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sparsity {
    /// Percent of the dense fp32 gradient bytes, header included.
    Budget(f64),
    /// Every entry; the value-lossless limit.
    KeepAll,
}

/// Forward and backward seconds per iteration, spread over blocks by size.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ComputeProfile {
    pub forward_s: f64,
    pub backward_s: f64,
}

impl Default for ComputeProfile {
    fn default() -> Self {
        Self { forward_s: 1e-3, backward_s: 2e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub dims: Vec<usize>,
    pub batch: usize,
    pub noise: f32,
    pub seed: u64,
    pub topology: FabricTopology,
    pub stripe_bytes: u64,
    pub host_subgroup_elems: u64,
    pub sparsity: Option<Sparsity>,
    pub error_feedback: bool,
    pub decompress_chunk: usize,
    pub loss_scale: LossScaleConfig,
    pub max_grad_norm: Option<f32>,
    pub deterministic: bool,
    pub storage_dir: PathBuf,
    pub compute: ComputeProfile,
}

impl EngineConfig {
    /// The default toy setup: a 382-128-128 MLP (65,536 parameters) with Adam.
    pub fn toy(mode: Mode, topology: FabricTopology, storage_dir: PathBuf) -> Self {
        Self {
            mode,
            optimizer: OptimizerConfig::adam(1e-3),
            dims: vec![382, 128, 128],
            batch: 16,
            noise: 0.05,
            seed: 0,
            topology,
            stripe_bytes: 4096,
            host_subgroup_elems: 16384,
            sparsity: mode.compressed().then_some(Sparsity::Budget(10.0)),
            error_feedback: false,
            decompress_chunk: 64,
            loss_scale: LossScaleConfig::default(),
            max_grad_norm: Some(1.0),
            deterministic: true,
            storage_dir,
            compute: ComputeProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.topology.validate()?;
        if self.mode.near_storage() && self.topology.devices.iter().any(|d| !d.is_csd()) {
            return Err(Error::Config(format!("mode {} needs computational storage devices", self.mode)));
        }
        match (self.mode.compressed(), self.sparsity) {
            (true, None) => return Err(Error::Config("compressed mode needs a compression ratio".into())),
            (true, Some(Sparsity::Budget(c))) if !(c > 0.0 && c <= 100.0) => {
                return Err(Error::Config(format!("compression ratio must lie in (0, 100], got {c}")))
            }
            (false, Some(_)) => return Err(Error::Config(format!("mode {} does not compress", self.mode))),
            _ => {}
        }
        if self.decompress_chunk == 0 || self.batch == 0 {
            return Err(Error::Config("batch and decompression chunk must be positive".into()));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    /// Updates applied so far, including this one.
    pub step: u64,
    pub loss: f32,
    pub skipped: bool,
    pub loss_scale: f32,
    pub clip_scale: f32,
    pub traffic: TrafficSnapshot,
}

enum Storage {
    Host(OptimizerShard),
    Volume { fabric: Fabric, layout: VolumeLayout, volume: Raid0Volume },
    Devices { fabric: Fabric, layouts: Vec<DeviceLayout> },
}

pub struct Engine {
    cfg: EngineConfig,
    task: SyntheticTask,
    blocks: Vec<Extent>,
    shape: WorkloadShape,
    partition: Partition,
    params16: Vec<f16>,
    scaler: LossScaler,
    step: u64,
    iteration: u64,
    storage: Storage,
    host_grads: Vec<f16>,
    feedback: Vec<Vec<ErrorFeedback>>,
    handler_logs: Vec<Vec<LogRow>>,
    handler_reports: Vec<PipelineReport>,
}

fn blocks_of(model: &Mlp) -> Vec<Extent> {
    let mut off = 0;
    model
        .blocks()
        .into_iter()
        .map(|len| {
            let e = Extent::new(off, len);
            off += len;
            e
        })
        .collect()
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Mlp::new(cfg.dims.clone())?;
        let n = model.param_count();
        let devices = cfg.topology.devices.len();
        let blocks = blocks_of(&model);
        let total: u64 = blocks.iter().map(|b| b.len).sum();
        let share = |s: f64| -> Vec<f64> { blocks.iter().map(|b| s * b.len as f64 / total as f64).collect() };
        let shape = WorkloadShape {
            mode: cfg.mode,
            optimizer: cfg.optimizer.kind,
            blocks: blocks.iter().map(|b| b.len).collect(),
            devices,
            accel_mem_capacity: cfg.topology.devices.iter().map(|d| d.accel_mem_capacity).min().unwrap_or(0),
            host_subgroup_elems: cfg.host_subgroup_elems,
            stripe_bytes: cfg.stripe_bytes,
            compression_pct: match cfg.sparsity {
                Some(Sparsity::Budget(c)) => Some(c),
                Some(Sparsity::KeepAll) => Some(100.0),
                None => None,
            },
            forward_s: share(cfg.compute.forward_s),
            backward_s: share(cfg.compute.backward_s),
        };
        shape.validate()?;
        let partition = shape.partition();
        let init = model.init(cfg.seed);
        let params16 = init.iter().map(|&p| narrow(p)).collect();
        let task = SyntheticTask::new(model, cfg.batch, cfg.noise, cfg.seed)?;
        let kind = cfg.optimizer.kind;
        let zeros = vec![0.0f32; n];

        let storage = match cfg.mode {
            Mode::InMemory => Storage::Host(OptimizerShard::new(init)),
            Mode::Base => {
                let layout = VolumeLayout::new(n as u64, kind);
                let volume = Raid0Volume { stripe: cfg.stripe_bytes, devices };
                let cap = raid0_device_len(layout.len(), cfg.stripe_bytes, devices);
                let fabric = Fabric::create(cfg.topology.clone(), &cfg.storage_dir, &vec![cap; devices])?;
                let all = Extent::new(0, n as u64);
                for &var in &layout.vars {
                    let data = if var == Variable::Params { &init } else { &zeros };
                    let ext = layout.extent(var, all);
                    volume.provision(&fabric, ext.offset, &f32_to_bytes(data))?;
                }
                for d in 0..devices {
                    let store = fabric.store(d)?;
                    store.add_entry(ManifestEntry {
                        variable: format!("raid0 stripe {} of {}", d, layout.vars.iter().map(|v| v.name()).collect::<Vec<_>>().join("+")),
                        segment_offset: 0,
                        segment_len: n as u64,
                        dtype: StoredDtype::Fp32,
                        byte_offset: 0,
                        byte_len: cap,
                    })?;
                    store.save_manifest()?;
                }
                Storage::Volume { fabric, layout, volume }
            }
            _ => {
                let layouts = match cfg.sparsity {
                    Some(Sparsity::KeepAll) => device_layouts_with(&shape, &|len| len)?,
                    Some(Sparsity::Budget(c)) => device_layouts_with(&shape, &|len| k_for_budget(len as usize, c) as u64)?,
                    None => device_layouts_with(&shape, &|len| len)?,
                };
                let caps: Vec<u64> = layouts.iter().map(|l| l.len()).collect();
                let fabric = Fabric::create(cfg.topology.clone(), &cfg.storage_dir, &caps)?;
                for l in &layouts {
                    let store = fabric.store(l.device)?;
                    let seg = l.segment;
                    let local = Extent::new(0, seg.len);
                    for &var in &l.vars {
                        let data = if var == Variable::Params {
                            &init[seg.offset as usize..seg.end() as usize]
                        } else {
                            &zeros[..seg.len as usize]
                        };
                        let ext = l.extent(var, local);
                        fabric.provision(l.device, ext.offset, &f32_to_bytes(data))?;
                        store.add_entry(ManifestEntry {
                            variable: var.name().into(),
                            segment_offset: seg.offset,
                            segment_len: seg.len,
                            dtype: StoredDtype::Fp32,
                            byte_offset: ext.offset,
                            byte_len: ext.len,
                        })?;
                    }
                    for (i, r) in l.records.iter().enumerate() {
                        let empty = SparseGradient {
                            block_len: r.global.len as usize,
                            indices: (0..r.k as u32).collect(),
                            values: vec![f16::ZERO; r.k as usize],
                        };
                        fabric.provision(l.device, r.extent.offset, &empty.encode())?;
                        store.add_entry(ManifestEntry {
                            variable: format!("grad_topk[{i}] block {}", r.block),
                            segment_offset: r.global.offset,
                            segment_len: r.global.len,
                            dtype: StoredDtype::Sparse,
                            byte_offset: r.extent.offset,
                            byte_len: r.extent.len,
                        })?;
                    }
                    store.save_manifest()?;
                }
                Storage::Devices { fabric, layouts }
            }
        };
        let feedback = match (&storage, cfg.error_feedback) {
            (Storage::Devices { layouts, .. }, true) => layouts
                .iter()
                .map(|l| l.records.iter().map(|r| ErrorFeedback::new(r.global.len as usize)).collect())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            scaler: LossScaler::new(cfg.loss_scale),
            cfg,
            task,
            blocks,
            shape,
            partition,
            params16,
            step: 0,
            iteration: 0,
            storage,
            host_grads: Vec::new(),
            feedback,
            handler_logs: Vec::new(),
            handler_reports: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &WorkloadShape {
        &self.shape
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn params16(&self) -> &[f16] {
        &self.params16
    }

    pub fn steps_applied(&self) -> u64 {
        self.step
    }

    pub fn loss_scale(&self) -> f32 {
        self.scaler.scale()
    }

    pub fn fabric(&self) -> Option<&Fabric> {
        match &self.storage {
            Storage::Host(_) => None,
            Storage::Volume { fabric, .. } | Storage::Devices { fabric, .. } => Some(fabric),
        }
    }

    pub fn traffic(&self) -> TrafficSnapshot {
        self.fabric().map_or_else(|| TrafficSnapshot::zeros(0), |f| f.ledger().snapshot())
    }

    /// Event logs and pool accounting of the last update, one entry per device.
    pub fn handler_logs(&self) -> &[Vec<LogRow>] {
        &self.handler_logs
    }

    pub fn handler_reports(&self) -> &[PipelineReport] {
        &self.handler_reports
    }

    /// The transfer trace a non-skipped iteration issues, when its byte counts
    /// are defined by the workload description.
    pub fn expected_trace(&self) -> Result<Option<Trace>> {
        if self.cfg.sparsity == Some(Sparsity::KeepAll) {
            return Ok(None);
        }
        Ok(Some(build_iteration(&self.shape)?))
    }

    /// Evaluation loss of the current fp16 parameters on a held-out batch.
    pub fn eval_loss(&self) -> f32 {
        self.task.eval_loss(&widen_slice(&self.params16))
    }

    /// Master parameters and moments as persisted, read without touching the ledger.
    pub fn persisted_shard(&self) -> Result<OptimizerShard> {
        let n = self.params16.len();
        let kind = self.cfg.optimizer.kind;
        let mut shard = OptimizerShard::new(vec![0.0; n]);
        shard.step_count = self.step;
        let target = |s: &mut OptimizerShard, var: Variable| -> *mut Vec<f32> {
            match var {
                Variable::Params => &mut s.params32,
                Variable::Momentum => &mut s.momentum,
                _ => &mut s.variance,
            }
        };
        match &self.storage {
            Storage::Host(s) => return Ok(s.clone()),
            Storage::Volume { fabric, layout, volume } => {
                for &var in kind.state_variables() {
                    let bytes = volume.inspect(fabric, layout.extent(var, Extent::new(0, n as u64)))?;
                    // SAFETY: `target` points into `shard`, which outlives this call.
                    bytes_to_f32(&bytes, unsafe { &mut *target(&mut shard, var) });
                }
            }
            Storage::Devices { fabric, layouts } => {
                for l in layouts {
                    let seg = l.segment;
                    for &var in kind.state_variables() {
                        let ext = l.extent(var, Extent::new(0, seg.len));
                        let bytes = fabric.inspect(l.device, ext.offset, ext.len)?;
                        let dst = unsafe { &mut *target(&mut shard, var) };
                        bytes_to_f32(&bytes, &mut dst[seg.offset as usize..seg.end() as usize]);
                    }
                }
            }
        }
        Ok(shard)
    }

    /// One training iteration.
    pub fn train_step(&mut self) -> Result<IterationReport> {
        let before = self.traffic();
        let it = self.iteration;
        self.iteration += 1;
        let (x, target) = self.task.batch(it);
        let scale = self.scaler.scale();

        let (loss, grad) = {
            let _phase = self.fabric().map(|f| f.enter_phase(Phase::Forward));
            let params = widen_slice(&self.params16);
            self.task.model.loss_and_grad(&params, &x, &target, self.cfg.batch)
        };
        let g16: Vec<f16> = grad.iter().map(|&g| narrow(g * scale)).collect();

        let mut checker = GradChecker::new(scale)?;
        self.in_phase(Phase::Backward, |e| {
            for b in (0..e.blocks.len()).rev() {
                let range = e.blocks[b];
                let seg = &g16[range.offset as usize..range.end() as usize];
                checker.feed_segment(seg);
                e.offload(b, range, seg, scale)?;
            }
            Ok(())
        })?;

        let gate = checker.finish();
        let skipped = self.scaler.update(gate.has_nan_or_inf);
        let mut clip = 1.0;
        if !skipped {
            clip = self.cfg.max_grad_norm.map_or(1.0, |m| clip_scale_from_norm(gate.global_sq_norm, m));
            let step = self.step + 1;
            self.in_phase(Phase::Update, |e| e.update(clip, step, scale))?;
            self.step = step;
        }
        let after = self.traffic();
        Ok(IterationReport {
            iteration: it,
            step: self.step,
            loss,
            skipped,
            loss_scale: scale,
            clip_scale: clip,
            traffic: if after.devices() == 0 { after } else { after.since(&before) },
        })
    }

    fn in_phase<T>(&mut self, phase: Phase, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let previous = self.fabric().map(|fab| fab.set_phase(phase));
        let r = f(self);
        if let (Some(p), Some(fab)) = (previous, self.fabric()) {
            fab.set_phase(p);
        }
        r
    }

    fn offload(&mut self, block: usize, range: Extent, seg: &[f16], scale: f32) -> Result<()> {
        let unscaled = |xs: &[f16]| -> Vec<f32> { xs.iter().map(|&g| unscale(g, scale)).collect() };
        match &self.storage {
            Storage::Host(_) => {
                if self.host_grads.len() != self.params16.len() {
                    self.host_grads = vec![f16::ZERO; self.params16.len()];
                }
                self.host_grads[range.offset as usize..range.end() as usize].copy_from_slice(seg);
            }
            Storage::Volume { fabric, layout, volume } => {
                let ext = layout.extent(Variable::Grad, range);
                volume.write(fabric, ext.offset, &f32_to_bytes(&unscaled(seg)))?;
            }
            Storage::Devices { fabric, layouts } if !self.cfg.mode.compressed() => {
                for piece in self.partition.split(range)? {
                    let start = (piece.global.offset - range.offset) as usize;
                    let part = &seg[start..start + piece.global.len as usize];
                    let ext = layouts[piece.device].extent(Variable::Grad, Extent::new(piece.local_offset, piece.global.len));
                    fabric.host_write(piece.device, ext.offset, &f32_to_bytes(&unscaled(part)))?;
                }
            }
            Storage::Devices { fabric, layouts } => {
                for l in layouts {
                    for (ri, r) in l.records.iter().enumerate().filter(|(_, r)| r.block == block) {
                        let start = (r.global.offset - range.offset) as usize;
                        let part = &seg[start..start + r.global.len as usize];
                        let sg = match self.feedback.get_mut(l.device).and_then(|f| f.get_mut(ri)) {
                            Some(ef) => ef.compress(part, r.k as usize, scale)?,
                            None => compress_topk(part, r.k as usize)?,
                        };
                        let bytes = sg.encode();
                        debug_assert_eq!(bytes.len() as u64, r.extent.len);
                        fabric.host_write(l.device, r.extent.offset, &bytes)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn update(&mut self, clip: f32, step: u64, scale: f32) -> Result<()> {
        let opt = self.cfg.optimizer;
        let kind = opt.kind;
        match &mut self.storage {
            Storage::Host(shard) => {
                let g: Vec<f32> = self.host_grads.iter().map(|&g| unscale(g, scale)).collect();
                apply_update_slices(
                    &mut shard.params32,
                    &mut shard.momentum,
                    &mut shard.variance,
                    &g,
                    &opt,
                    clip,
                    step,
                )?;
                shard.step_count = step;
                for (h, &p) in self.params16.iter_mut().zip(&shard.params32) {
                    *h = narrow(p);
                }
            }
            Storage::Volume { fabric, layout, volume } => {
                let states = kind.state_variables();
                for sub in host_subgroups(self.params16.len() as u64, self.cfg.host_subgroup_elems) {
                    let len = sub.len as usize;
                    let mut bufs: Vec<Vec<f32>> = Vec::new();
                    for &var in states.iter().chain([Variable::Grad].iter()) {
                        let bytes = volume.read(fabric, layout.extent(var, sub))?;
                        let mut v = vec![0.0f32; len];
                        bytes_to_f32(&bytes, &mut v);
                        bufs.push(v);
                    }
                    let grad = bufs.pop().unwrap();
                    let mut p = std::mem::take(&mut bufs[0]);
                    let mut m = Vec::new();
                    let mut v = Vec::new();
                    for (i, &var) in states.iter().enumerate().skip(1) {
                        let b = std::mem::take(&mut bufs[i]);
                        if var == Variable::Momentum {
                            m = b;
                        } else {
                            v = b;
                        }
                    }
                    apply_update_slices(&mut p, &mut m, &mut v, &grad, &opt, clip, step)?;
                    for &var in states {
                        let data = match var {
                            Variable::Params => &p,
                            Variable::Momentum => &m,
                            _ => &v,
                        };
                        volume.write(fabric, layout.extent(var, sub).offset, &f32_to_bytes(data))?;
                    }
                    for (h, &x) in self.params16[sub.offset as usize..sub.end() as usize].iter_mut().zip(&p) {
                        *h = narrow(x);
                    }
                }
            }
            Storage::Devices { fabric, layouts } => {
                let mode = self.cfg.mode;
                let shape = &self.shape;
                let deterministic = self.cfg.deterministic;
                let chunk = self.cfg.decompress_chunk;
                let update = move |_: &Tasklet, b: Buffers<'_>| -> Result<()> {
                    apply_update_slices(b.params, b.momentum, b.variance, b.grad, &opt, clip, step)?;
                    Ok(())
                };
                let mut slices: Vec<&mut [f16]> = Vec::with_capacity(layouts.len());
                let mut rest: &mut [f16] = &mut self.params16;
                for l in layouts.iter() {
                    let (head, tail) = rest.split_at_mut(l.segment.len as usize);
                    slices.push(head);
                    rest = tail;
                }
                let fabric = &*fabric;
                let run_device = |l: &DeviceLayout, host: &mut [f16]| -> Result<(Vec<LogRow>, PipelineReport)> {
                    let tasklets = device_tasklets(shape, l)?;
                    let capacity = fabric.topology().devices[l.device].accel_mem_capacity;
                    let pool = BufferPool::new(kind, capacity);
                    let sparse = if mode.compressed() { load_records(fabric, l)? } else { Vec::new() };
                    let io = DeviceIo { fabric, layout: l, host: Mutex::new(host), sparse, scale, chunk };
                    let log = EventLog::new();
                    let report = if mode.overlapped() {
                        let schedule = if deterministic { Schedule::Deterministic } else { Schedule::Threaded };
                        run_pipeline(&tasklets, &pool, &io, &update, &log, schedule)?
                    } else {
                        naive_pipeline(&tasklets, &pool, &io, &update, &log)?
                    };
                    Ok((log.rows(), report))
                };
                let results: Vec<Result<(Vec<LogRow>, PipelineReport)>> = if deterministic {
                    layouts.iter().zip(slices).map(|(l, s)| run_device(l, s)).collect()
                } else {
                    std::thread::scope(|sc| {
                        let handles: Vec<_> =
                            layouts.iter().zip(slices).map(|(l, s)| sc.spawn(move || run_device(l, s))).collect();
                        handles.into_iter().map(|h| h.join().expect("device worker panicked")).collect()
                    })
                };
                self.handler_logs.clear();
                self.handler_reports.clear();
                for r in results {
                    let (log, report) = r?;
                    self.handler_logs.push(log);
                    self.handler_reports.push(report);
                }
            }
        }
        Ok(())
    }
}

fn load_records(fabric: &Fabric, l: &DeviceLayout) -> Result<Vec<SparseGradient>> {
    let Some(first) = l.records.first() else { return Ok(Vec::new()) };
    let bytes = fabric.p2p_read(l.device, first.extent.offset, l.sparse_bytes())?;
    let base = first.extent.offset;
    l.records
        .iter()
        .map(|r| {
            let lo = (r.extent.offset - base) as usize;
            Ok(SparseGradient::decode(&bytes[lo..lo + r.extent.len as usize])?)
        })
        .collect()
}

/// One device's side of the update: p2p transfers between its SSD region and
/// the accelerator buffers, and the host pull of updated parameters.
struct DeviceIo<'a> {
    fabric: &'a Fabric,
    layout: &'a DeviceLayout,
    host: Mutex<&'a mut [f16]>,
    sparse: Vec<SparseGradient>,
    scale: f32,
    chunk: usize,
}

impl TaskletIo for DeviceIo<'_> {
    fn load(&self, task: &Tasklet, var: Variable, dst: &mut [f32]) -> Result<()> {
        if var == Variable::Grad && !self.layout.records.is_empty() {
            dst.iter_mut().for_each(|x| *x = 0.0);
            for (r, sg) in self.layout.records.iter().zip(&self.sparse) {
                let rec = Extent::new(r.local_offset, r.global.len);
                if let Some(o) = rec.intersect(&task.range) {
                    let window = (o.offset - rec.offset) as usize..(o.end() - rec.offset) as usize;
                    let out = &mut dst[(o.offset - task.range.offset) as usize..(o.end() - task.range.offset) as usize];
                    scatter_range(sg, window, self.chunk, out)?;
                }
            }
            // same operation as the dense path's unscale
            dst.iter_mut().for_each(|x| *x /= self.scale);
            return Ok(());
        }
        let ext = self.layout.extent(var, task.range);
        let bytes = self.fabric.p2p_read(self.layout.device, ext.offset, ext.len)?;
        bytes_to_f32(&bytes, dst);
        Ok(())
    }

    fn write_back(&self, task: &Tasklet, var: Variable, src: &[f32], priority: Priority) -> Result<()> {
        let ext = self.layout.extent(var, task.range);
        self.fabric.p2p_write(self.layout.device, ext.offset, &f32_to_bytes(src), priority)
    }

    fn params_ready(&self, task: &Tasklet) -> Result<()> {
        let ext = self.layout.extent(Variable::Params, task.range);
        let bytes = self.fabric.host_read(self.layout.device, ext.offset, ext.len)?;
        let mut p = vec![0.0f32; task.range.len as usize];
        bytes_to_f32(&bytes, &mut p);
        let mut host = self.host.lock().unwrap();
        let dst = &mut host[task.range.offset as usize..task.range.end() as usize];
        for (h, &x) in dst.iter_mut().zip(&p) {
            *h = narrow(x);
        }
        Ok(())
    }
}

//! Device-side transfer handler: moves each subgroup's variables between the
//! SSD and accelerator buffers around an update function.
//!
//! The optimized pipeline allocates one buffer per variable once, sized for
//! the largest tasklet, and runs two workers that take alternate tasklets.
//! Buffer ownership passes between them through per-buffer turn counters: a
//! worker may only take a buffer when its turn equals the tasklet index, and
//! hands it on (turn + 1) when done. Parameters and gradients are handed on
//! right after the urgent parameter writeback, so the other worker starts
//! loading the next tasklet while the momentum and variance writebacks, issued
//! at low priority, are still draining.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};

use nearstore_core::layout::Tasklet;
use nearstore_core::numerics::{OptimizerKind, Variable};
use nearstore_core::trace::Priority;
use serde::Serialize;

use crate::error::{Error, Result};

/// The device side of a tasklet's transfers.
pub trait TaskletIo: Sync {
    fn load(&self, task: &Tasklet, var: Variable, dst: &mut [f32]) -> Result<()>;
    fn write_back(&self, task: &Tasklet, var: Variable, src: &[f32], priority: Priority) -> Result<()>;
    /// Updated parameters of `task` are persisted and may be pulled by the host.
    fn params_ready(&self, task: &Tasklet) -> Result<()>;
}

/// Views of one tasklet's buffers. Variables the optimizer does not use are empty.
pub struct Buffers<'a> {
    pub params: &'a mut [f32],
    pub momentum: &'a mut [f32],
    pub variance: &'a mut [f32],
    pub grad: &'a [f32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PoolStats {
    pub in_use: u64,
    pub peak: u64,
    pub allocations: u64,
}

/// Accelerator memory accounting. Buffer sets carry one fp32 buffer per
/// variable the optimizer touches plus the gradient.
#[derive(Debug)]
pub struct BufferPool {
    kind: OptimizerKind,
    capacity: u64,
    stats: Mutex<PoolStats>,
}

#[derive(Debug)]
pub struct BufferSet {
    pub elems: usize,
    pub bufs: Vec<(Variable, Vec<f32>)>,
}

impl BufferSet {
    fn take(&mut self, var: Variable) -> Vec<f32> {
        self.bufs.iter_mut().find(|(v, _)| *v == var).map(|(_, b)| std::mem::take(b)).unwrap_or_default()
    }
}

impl BufferPool {
    pub fn new(kind: OptimizerKind, capacity: u64) -> Self {
        Self { kind, capacity, stats: Mutex::new(PoolStats::default()) }
    }

    pub fn variables(&self) -> Vec<Variable> {
        let mut v = self.kind.state_variables().to_vec();
        v.push(Variable::Grad);
        v
    }

    pub fn bytes_for(&self, elems: usize) -> u64 {
        elems as u64 * self.kind.update_bytes_per_element()
    }

    pub fn allocate(&self, elems: usize) -> Result<BufferSet> {
        let bytes = self.bytes_for(elems);
        let mut s = self.stats.lock().unwrap();
        if s.in_use + bytes > self.capacity {
            return Err(Error::Config(format!(
                "buffer set of {bytes} bytes does not fit accelerator memory ({} of {} in use)",
                s.in_use, self.capacity
            )));
        }
        s.in_use += bytes;
        s.peak = s.peak.max(s.in_use);
        s.allocations += 1;
        Ok(BufferSet { elems, bufs: self.variables().into_iter().map(|v| (v, vec![0.0f32; elems])).collect() })
    }

    pub fn release(&self, elems: usize) {
        let bytes = self.bytes_for(elems);
        let mut s = self.stats.lock().unwrap();
        s.in_use -= bytes;
    }

    pub fn stats(&self) -> PoolStats {
        *self.stats.lock().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogRow {
    pub tasklet: usize,
    pub event: String,
    pub logical_time: u64,
    pub bytes: u64,
}

/// Totally ordered event record; the logical clock ticks once per row.
#[derive(Debug, Default)]
pub struct EventLog {
    rows: Mutex<Vec<LogRow>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tasklet: usize, event: impl Into<String>, bytes: u64) -> u64 {
        let mut rows = self.rows.lock().unwrap();
        let t = rows.len() as u64;
        rows.push(LogRow { tasklet, event: event.into(), logical_time: t, bytes });
        t
    }

    pub fn rows(&self) -> Vec<LogRow> {
        self.rows.lock().unwrap().clone()
    }

    pub fn time_of(&self, tasklet: usize, event: &str) -> Option<u64> {
        self.rows.lock().unwrap().iter().find(|r| r.tasklet == tasklet && r.event == event).map(|r| r.logical_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Two worker threads.
    Threaded,
    /// Single-thread emulation of the two-worker order; reproducible logs.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub tasklets: usize,
    pub pool: PoolStats,
    /// Bytes held from the first allocation on.
    pub initial_allocation: u64,
}

fn bytes(len: usize) -> u64 {
    4 * len as u64
}

fn check_tasklets(tasklets: &[Tasklet]) -> Result<()> {
    for (i, t) in tasklets.iter().enumerate() {
        if t.index != i {
            return Err(Error::Config(format!("tasklet {i} carries index {}", t.index)));
        }
    }
    Ok(())
}

struct Step<'a, Io: TaskletIo, F> {
    io: &'a Io,
    update: &'a F,
    log: &'a EventLog,
    states: Vec<Variable>,
}

impl<Io, F> Step<'_, Io, F>
where
    Io: TaskletIo,
    F: Fn(&Tasklet, Buffers<'_>) -> Result<()> + Sync,
{
    fn load(&self, task: &Tasklet, var: Variable, buf: &mut [f32]) -> Result<()> {
        let len = task.range.len as usize;
        self.log.record(task.index, format!("load_begin:{}", var.name()), bytes(len));
        self.io.load(task, var, &mut buf[..len])?;
        self.log.record(task.index, format!("load_end:{}", var.name()), bytes(len));
        Ok(())
    }

    fn write(&self, task: &Tasklet, var: Variable, buf: &[f32], priority: Priority) -> Result<()> {
        let len = task.range.len as usize;
        self.log.record(task.index, format!("writeback_begin:{}", var.name()), bytes(len));
        self.io.write_back(task, var, &buf[..len], priority)?;
        self.log.record(task.index, format!("writeback_end:{}", var.name()), bytes(len));
        Ok(())
    }

    fn compute(&self, task: &Tasklet, params: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32]) -> Result<()> {
        let len = task.range.len as usize;
        let cut = |b: &mut [f32]| if b.is_empty() { 0 } else { len };
        let (lm, lv) = (cut(m), cut(v));
        self.log.record(task.index, "update_begin", 0);
        (self.update)(
            task,
            Buffers { params: &mut params[..len], momentum: &mut m[..lm], variance: &mut v[..lv], grad: &grad[..len] },
        )?;
        self.log.record(task.index, "update_end", 0);
        Ok(())
    }

    fn ready(&self, task: &Tasklet) -> Result<()> {
        self.io.params_ready(task)?;
        self.log.record(task.index, "params_ready", bytes(task.range.len as usize));
        Ok(())
    }
}

/// Reference schedule: allocate, load, update, write back, release, one
/// tasklet at a time.
pub fn naive_pipeline<Io, F>(
    tasklets: &[Tasklet],
    pool: &BufferPool,
    io: &Io,
    update: &F,
    log: &EventLog,
) -> Result<PipelineReport>
where
    Io: TaskletIo,
    F: Fn(&Tasklet, Buffers<'_>) -> Result<()> + Sync,
{
    check_tasklets(tasklets)?;
    let states: Vec<Variable> = pool.kind.state_variables()[1..].to_vec();
    let step = Step { io, update, log, states };
    let mut initial = 0;
    for task in tasklets {
        let len = task.range.len as usize;
        let mut set = pool.allocate(len)?;
        if initial == 0 {
            initial = pool.stats().in_use;
        }
        log.record(task.index, "alloc", pool.bytes_for(len));
        let result = (|| {
            let mut p = set.take(Variable::Params);
            let mut g = set.take(Variable::Grad);
            let mut m = set.take(Variable::Momentum);
            let mut v = set.take(Variable::Variance);
            step.load(task, Variable::Params, &mut p)?;
            step.load(task, Variable::Grad, &mut g)?;
            for &var in &step.states {
                let buf = if var == Variable::Momentum { &mut m } else { &mut v };
                step.load(task, var, buf)?;
            }
            step.compute(task, &mut p, &g, &mut m, &mut v)?;
            step.write(task, Variable::Params, &p, Priority::Normal)?;
            for &var in &step.states {
                let buf = if var == Variable::Momentum { &m } else { &v };
                step.write(task, var, buf, Priority::Normal)?;
            }
            step.ready(task)
        })();
        pool.release(len);
        log.record(task.index, "free", pool.bytes_for(len));
        result?;
    }
    Ok(PipelineReport { tasklets: tasklets.len(), pool: pool.stats(), initial_allocation: initial })
}

struct Slot {
    state: Mutex<(usize, Vec<f32>)>,
    turn_changed: Condvar,
}

impl Slot {
    fn new(buf: Vec<f32>) -> Self {
        Self { state: Mutex::new((0, buf)), turn_changed: Condvar::new() }
    }

    fn acquire(&self, turn: usize, abort: &AtomicBool) -> Option<Vec<f32>> {
        let mut s = self.state.lock().unwrap();
        while s.0 != turn && !abort.load(Ordering::SeqCst) {
            s = self.turn_changed.wait(s).unwrap();
        }
        if abort.load(Ordering::SeqCst) {
            return None;
        }
        Some(std::mem::take(&mut s.1))
    }

    fn release(&self, turn: usize, buf: Vec<f32>) {
        let mut s = self.state.lock().unwrap();
        s.0 = turn + 1;
        s.1 = buf;
        self.turn_changed.notify_all();
    }

    fn wake(&self) {
        let _s = self.state.lock().unwrap();
        self.turn_changed.notify_all();
    }
}

/// Overlapped schedule over preallocated buffers.
pub fn run_pipeline<Io, F>(
    tasklets: &[Tasklet],
    pool: &BufferPool,
    io: &Io,
    update: &F,
    log: &EventLog,
    schedule: Schedule,
) -> Result<PipelineReport>
where
    Io: TaskletIo,
    F: Fn(&Tasklet, Buffers<'_>) -> Result<()> + Sync,
{
    check_tasklets(tasklets)?;
    let Some(max_len) = tasklets.iter().map(|t| t.range.len as usize).max() else {
        return Ok(PipelineReport { tasklets: 0, pool: pool.stats(), initial_allocation: 0 });
    };
    let mut set = pool.allocate(max_len)?;
    let initial = pool.bytes_for(max_len);
    log.record(0, "alloc", initial);
    let states: Vec<Variable> = pool.kind.state_variables()[1..].to_vec();
    let step = Step { io, update, log, states };

    let result = match schedule {
        Schedule::Deterministic => emulate(tasklets, &mut set, &step),
        Schedule::Threaded => threaded(tasklets, &mut set, &step),
    };
    pool.release(max_len);
    log.record(tasklets.len() - 1, "free", initial);
    result?;
    Ok(PipelineReport { tasklets: tasklets.len(), pool: pool.stats(), initial_allocation: initial })
}

fn state_buf<'a>(var: Variable, m: &'a mut Vec<f32>, v: &'a mut Vec<f32>) -> &'a mut Vec<f32> {
    if var == Variable::Momentum {
        m
    } else {
        v
    }
}

/// The two-worker order, replayed on one thread: the state writeback of
/// tasklet `i - 1` is issued after tasklet `i` has loaded its parameters and
/// gradient.
fn emulate<Io, F>(tasklets: &[Tasklet], set: &mut BufferSet, step: &Step<'_, Io, F>) -> Result<()>
where
    Io: TaskletIo,
    F: Fn(&Tasklet, Buffers<'_>) -> Result<()> + Sync,
{
    let mut p = set.take(Variable::Params);
    let mut g = set.take(Variable::Grad);
    let mut m = set.take(Variable::Momentum);
    let mut v = set.take(Variable::Variance);
    let mut pending: Option<&Tasklet> = None;
    for task in tasklets {
        step.load(task, Variable::Params, &mut p)?;
        step.load(task, Variable::Grad, &mut g)?;
        if let Some(prev) = pending.take() {
            for &var in &step.states {
                let buf = state_buf(var, &mut m, &mut v);
                step.write(prev, var, buf, Priority::Low)?;
            }
        }
        for &var in &step.states {
            step.load(task, var, state_buf(var, &mut m, &mut v))?;
        }
        step.compute(task, &mut p, &g, &mut m, &mut v)?;
        step.write(task, Variable::Params, &p, Priority::Normal)?;
        step.ready(task)?;
        pending = Some(task);
    }
    if let Some(prev) = pending {
        for &var in &step.states {
            let buf = state_buf(var, &mut m, &mut v);
            step.write(prev, var, buf, Priority::Low)?;
        }
    }
    Ok(())
}

fn threaded<Io, F>(tasklets: &[Tasklet], set: &mut BufferSet, step: &Step<'_, Io, F>) -> Result<()>
where
    Io: TaskletIo,
    F: Fn(&Tasklet, Buffers<'_>) -> Result<()> + Sync,
{
    let params = Slot::new(set.take(Variable::Params));
    let grad = Slot::new(set.take(Variable::Grad));
    let momentum = Slot::new(set.take(Variable::Momentum));
    let variance = Slot::new(set.take(Variable::Variance));
    let state_slot = |var: Variable| if var == Variable::Momentum { &momentum } else { &variance };
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);

    let worker = |first: usize| {
        for task in tasklets.iter().skip(first).step_by(2) {
            let i = task.index;
            let run = || -> Result<Option<()>> {
                let Some(mut p) = params.acquire(i, &abort) else { return Ok(None) };
                let Some(mut g) = grad.acquire(i, &abort) else { return Ok(None) };
                step.load(task, Variable::Params, &mut p)?;
                step.load(task, Variable::Grad, &mut g)?;
                let mut m = Vec::new();
                let mut v = Vec::new();
                for &var in &step.states {
                    let Some(buf) = state_slot(var).acquire(i, &abort) else { return Ok(None) };
                    *state_buf(var, &mut m, &mut v) = buf;
                    step.load(task, var, state_buf(var, &mut m, &mut v))?;
                }
                step.compute(task, &mut p, &g, &mut m, &mut v)?;
                step.write(task, Variable::Params, &p, Priority::Normal)?;
                step.ready(task)?;
                params.release(i, p);
                grad.release(i, g);
                for &var in &step.states {
                    let buf = std::mem::take(state_buf(var, &mut m, &mut v));
                    step.write(task, var, &buf, Priority::Low)?;
                    state_slot(var).release(i, buf);
                }
                Ok(Some(()))
            };
            match run() {
                Ok(Some(())) => {}
                Ok(None) => return,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    abort.store(true, Ordering::SeqCst);
                    for s in [&params, &grad, &momentum, &variance] {
                        s.wake();
                    }
                    return;
                }
            }
        }
    };
    std::thread::scope(|s| {
        s.spawn(|| worker(1));
        worker(0);
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(Error::Aborted(e.to_string())),
        None => Ok(()),
    }
}

//! CSV report writers. Floats are written with Rust's shortest round-trip
//! formatting, so identical inputs give identical bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use nearstore_core::ledger::{Direction, Edge, Phase, TrafficSnapshot};
use nearstore_core::sim::{Breakdown, Timeline};
use nearstore_core::workload::Mode;
use serde::Serialize;

use crate::engine::IterationReport;
use crate::error::{Error, Result};
use crate::experiment::ExperimentReport;
use crate::handler::LogRow;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.into(), reason: e.to_string() }
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct IterationRow {
    iteration: u64,
    step: u64,
    loss: f32,
    skipped: bool,
    loss_scale: f32,
    clip_scale: f32,
    host_read_bytes: u64,
    host_write_bytes: u64,
    backward_host_write_bytes: u64,
    update_host_read_bytes: u64,
    update_host_write_bytes: u64,
    internal_read_bytes: u64,
    internal_write_bytes: u64,
}

fn iteration_row(r: &IterationReport) -> IterationRow {
    let t = &r.traffic;
    IterationRow {
        iteration: r.iteration,
        step: r.step,
        loss: r.loss,
        skipped: r.skipped,
        loss_scale: r.loss_scale,
        clip_scale: r.clip_scale,
        host_read_bytes: t.total(Edge::Host, Direction::Read),
        host_write_bytes: t.total(Edge::Host, Direction::Write),
        backward_host_write_bytes: t.phase_total(Edge::Host, Direction::Write, Phase::Backward),
        update_host_read_bytes: t.phase_total(Edge::Host, Direction::Read, Phase::Update),
        update_host_write_bytes: t.phase_total(Edge::Host, Direction::Write, Phase::Update),
        internal_read_bytes: t.total(Edge::Internal, Direction::Read),
        internal_write_bytes: t.total(Edge::Internal, Direction::Write),
    }
}

pub fn write_iterations(path: &Path, iterations: &[IterationReport]) -> Result<()> {
    write_rows(path, iterations.iter().map(iteration_row))
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    mode: Mode,
    devices: usize,
    params: usize,
    steps: usize,
    applied_steps: u64,
    final_loss: Option<f32>,
    eval_loss: f32,
    host_read_bytes: u64,
    host_write_bytes: u64,
    internal_read_bytes: u64,
    internal_write_bytes: u64,
    sim_forward_s: f64,
    sim_backward_s: f64,
    sim_update_s: f64,
    sim_total_s: f64,
    sim_update_fraction: f64,
    grad_record_bytes: Option<u64>,
    grad_nominal_bytes: Option<f64>,
    grad_effective_pct: Option<f64>,
    grad_pair_slot_pct: Option<f64>,
}

pub fn write_summary(path: &Path, r: &ExperimentReport) -> Result<()> {
    let t = &r.traffic;
    let (host_read_bytes, host_write_bytes) = r.host_bytes();
    let c = r.compression.as_ref();
    write_rows(
        path,
        [SummaryRow {
            mode: r.mode,
            devices: r.devices,
            params: r.params,
            steps: r.iterations.len(),
            applied_steps: r.applied_steps(),
            final_loss: r.iterations.last().map(|i| i.loss),
            eval_loss: r.final_eval_loss,
            host_read_bytes,
            host_write_bytes,
            internal_read_bytes: t.total(Edge::Internal, Direction::Read),
            internal_write_bytes: t.total(Edge::Internal, Direction::Write),
            sim_forward_s: r.breakdown.forward,
            sim_backward_s: r.breakdown.backward,
            sim_update_s: r.breakdown.update,
            sim_total_s: r.breakdown.total,
            sim_update_fraction: r.breakdown.fraction(Phase::Update),
            grad_record_bytes: c.map(|c| c.record_bytes),
            grad_nominal_bytes: c.map(|c| c.nominal_bytes),
            grad_effective_pct: c.map(|c| c.effective_pct()),
            grad_pair_slot_pct: c.map(|c| c.pair_slot_pct()),
        }],
    )
}

#[derive(Debug, Serialize)]
struct TimelineRow {
    resource: String,
    start: f64,
    end: f64,
    bytes: u64,
    phase: Phase,
    role: String,
    device: Option<usize>,
    tasklet: Option<usize>,
}

pub fn write_timeline(path: &Path, tl: &Timeline) -> Result<()> {
    write_rows(
        path,
        tl.events.iter().map(|e| TimelineRow {
            resource: e.resource.to_string(),
            start: e.start,
            end: e.end,
            bytes: e.bytes,
            phase: e.phase,
            role: e.role.to_string(),
            device: e.tasklet.map(|t| t.device),
            tasklet: e.tasklet.map(|t| t.index),
        }),
    )
}

#[derive(Debug, Serialize)]
struct BreakdownRow {
    category: &'static str,
    seconds: f64,
    fraction: f64,
}

pub fn write_breakdown(path: &Path, b: &Breakdown) -> Result<()> {
    let mut rows: Vec<BreakdownRow> =
        Phase::ALL.iter().map(|&p| BreakdownRow { category: p.label(), seconds: b.phase(p), fraction: b.fraction(p) }).collect();
    rows.push(BreakdownRow { category: "Total", seconds: b.total, fraction: if b.total > 0.0 { 1.0 } else { 0.0 } });
    write_rows(path, rows)
}

#[derive(Debug, Serialize)]
struct EventRow<'a> {
    device: usize,
    tasklet: usize,
    event: &'a str,
    logical_time: u64,
    bytes: u64,
}

pub fn write_events(path: &Path, logs: &[Vec<LogRow>]) -> Result<()> {
    write_rows(
        path,
        logs.iter().enumerate().flat_map(|(device, rows)| {
            rows.iter().map(move |r| EventRow {
                device,
                tasklet: r.tasklet,
                event: &r.event,
                logical_time: r.logical_time,
                bytes: r.bytes,
            })
        }),
    )
}

/// One grid point of a timing sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub devices: usize,
    pub compression_pct: Option<f64>,
    pub forward_s: f64,
    pub backward_s: f64,
    pub update_s: f64,
    pub total_s: f64,
    pub update_fraction: f64,
    /// Against the same mode and ratio at the smallest swept device count.
    pub speedup_total: f64,
    pub speedup_update: f64,
    /// Against BASE at the same device count, when swept.
    pub speedup_vs_base: Option<f64>,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_traffic(path: &Path, t: &TrafficSnapshot) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        device: usize,
        edge: &'static str,
        direction: &'static str,
        phase: Phase,
        bytes: u64,
    }
    let mut rows = Vec::new();
    for d in 0..t.devices() {
        for (edge, en) in [(Edge::Host, "host"), (Edge::Internal, "internal")] {
            for (dir, dn) in [(Direction::Read, "read"), (Direction::Write, "write")] {
                for p in Phase::ALL {
                    rows.push(Row { device: d, edge: en, direction: dn, phase: p, bytes: t.get(d, edge, dir, p) });
                }
            }
        }
    }
    write_rows(path, rows)
}

/// Writes every CSV of a training run under `dir` and returns the paths.
pub fn write_experiment(dir: &Path, r: &ExperimentReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> =
        ["iterations", "summary", "traffic", "timeline", "breakdown", "events"].iter().map(|n| dir.join(format!("{n}.csv"))).collect();
    write_iterations(&paths[0], &r.iterations)?;
    write_summary(&paths[1], r)?;
    write_traffic(&paths[2], &r.traffic)?;
    write_timeline(&paths[3], &r.timeline)?;
    write_breakdown(&paths[4], &r.breakdown)?;
    write_events(&paths[5], &r.events)?;
    Ok(paths)
}

/// Human-readable summary of a run.
pub fn print_summary(out: &mut impl Write, r: &ExperimentReport) -> std::io::Result<()> {
    let (rd, wr) = r.host_bytes();
    writeln!(out, "mode {} on {} device(s), {} params", r.mode, r.devices, r.params)?;
    writeln!(out, "steps {} (applied {}), eval loss {}", r.iterations.len(), r.applied_steps(), r.final_eval_loss)?;
    writeln!(out, "host link bytes: read {rd}, write {wr}")?;
    if let Some(c) = &r.compression {
        writeln!(
            out,
            "gradient records: {} bytes per iteration ({:.3}% of dense; nominal {:.0} bytes; pair slots {:.3}%)",
            c.record_bytes,
            c.effective_pct(),
            c.nominal_bytes,
            c.pair_slot_pct()
        )?;
    }
    if r.breakdown.total > 0.0 {
        for p in Phase::ALL {
            writeln!(out, "  {:<42} {:>12.6} s  {:>6.2}%", p.label(), r.breakdown.phase(p), 100.0 * r.breakdown.fraction(p))?;
        }
        writeln!(out, "  {:<42} {:>12.6} s", "Total", r.breakdown.total)?;
    }
    Ok(())
}

//! Runs a configured number of training steps and times one iteration of the
//! same workload in the simulator.

use std::path::Path;

use nearstore_core::calibration::paper_like;
use nearstore_core::ledger::{Direction, Edge, Phase, TrafficSnapshot};
use nearstore_core::sim::{simulate, summarize, Breakdown, SimConfig, Timeline};
use nearstore_core::workload::{compression_accounting, CompressionAccounting, Mode};

use crate::config::ExperimentConfig;
use crate::engine::{Engine, IterationReport};
use crate::error::{Error, Result};
use crate::handler::LogRow;
use crate::report::SweepRow;

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub devices: usize,
    pub params: usize,
    pub iterations: Vec<IterationReport>,
    pub traffic: TrafficSnapshot,
    pub final_eval_loss: f32,
    /// Simulated timing of one applied iteration.
    pub timeline: Timeline,
    pub breakdown: Breakdown,
    pub compression: Option<CompressionAccounting>,
    /// Per device, the handler event log of the last update.
    pub events: Vec<Vec<LogRow>>,
}

impl ExperimentReport {
    pub fn applied_steps(&self) -> u64 {
        self.iterations.last().map_or(0, |r| r.step)
    }

    pub fn host_bytes(&self) -> (u64, u64) {
        (self.traffic.total(Edge::Host, Direction::Read), self.traffic.total(Edge::Host, Direction::Write))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, storage_dir: &Path) -> Result<ExperimentReport> {
    let engine_cfg = cfg.engine_config(storage_dir.to_path_buf())?;
    let sim = cfg.sim;
    let mut engine = Engine::new(engine_cfg)?;
    let devices = engine.config().topology.devices.len();
    let mut traffic = TrafficSnapshot::zeros(engine.traffic().devices());
    let mut iterations = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let r = engine.train_step()?;
        log::debug!("iteration {} loss {} skipped {}", r.iteration, r.loss, r.skipped);
        for d in 0..traffic.devices() {
            for edge in [Edge::Host, Edge::Internal] {
                for dir in [Direction::Read, Direction::Write] {
                    for p in Phase::ALL {
                        traffic.add(d, edge, dir, p, r.traffic.get(d, edge, dir, p));
                    }
                }
            }
        }
        iterations.push(r);
    }
    let (timeline, breakdown) = match engine.expected_trace()? {
        Some(trace) => {
            let tl = simulate(&trace, &engine.config().topology, &sim)?;
            let b = summarize(&tl);
            (tl, b)
        }
        None => (Timeline::default(), Breakdown::default()),
    };
    Ok(ExperimentReport {
        mode: cfg.mode,
        devices,
        params: engine.params16().len(),
        final_eval_loss: engine.eval_loss(),
        compression: compression_accounting(engine.shape())?,
        events: engine.handler_logs().to_vec(),
        iterations,
        traffic,
        timeline,
        breakdown,
    })
}

/// Timing sweep over the paper-scale calibration: every mode at every device
/// count, and for `su_o_c` every ratio. Grid points run in parallel.
pub fn sweep(modes: &[Mode], devices: &[usize], ratios: &[f64], sim: &SimConfig) -> Result<Vec<SweepRow>> {
    let mut points: Vec<(Mode, usize, Option<f64>)> = Vec::new();
    for &mode in modes {
        let rs: Vec<Option<f64>> = if mode.compressed() { ratios.iter().map(|&r| Some(r)).collect() } else { vec![None] };
        for r in rs {
            for &n in devices {
                points.push((mode, n, r));
            }
        }
    }
    if modes.contains(&Mode::InMemory) {
        return Err(Error::Config("in_memory has no storage traffic to time".into()));
    }
    let results: Vec<Result<Breakdown>> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .map(|&(mode, n, r)| {
                s.spawn(move || {
                    let mut sc = paper_like(mode, n, r.unwrap_or(100.0));
                    sc.sim = *sim;
                    Ok(sc.run()?.1)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let breakdowns = results.into_iter().collect::<Result<Vec<_>>>()?;
    let first = devices.iter().copied().min().unwrap_or(1);
    let find = |mode: Mode, n: usize, r: Option<f64>| {
        points.iter().position(|&p| p == (mode, n, r)).map(|i| breakdowns[i])
    };
    Ok(points
        .iter()
        .zip(&breakdowns)
        .map(|(&(mode, n, r), b)| {
            let base = find(mode, first, r).unwrap_or(*b);
            SweepRow {
                mode,
                devices: n,
                compression_pct: r,
                forward_s: b.forward,
                backward_s: b.backward,
                update_s: b.update,
                total_s: b.total,
                update_fraction: b.fraction(Phase::Update),
                speedup_total: base.total / b.total,
                speedup_update: base.update / b.update,
                speedup_vs_base: find(Mode::Base, n, None).map(|bb| bb.total / b.total),
            }
        })
        .collect())
}

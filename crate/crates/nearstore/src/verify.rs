//! Self-check suites behind `nearstore verify`: mode equivalence against the
//! in-memory oracle, traffic ledger plus persisted state, and format
//! roundtrips. Failures are results, not errors.

use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use nearstore_core::compression::{compress_topk, SparseGradient};
use nearstore_core::f16;
use nearstore_core::layout::Extent;
use nearstore_core::ledger::{Direction, Edge, Phase};
use nearstore_core::numerics::{narrow, OptimizerShard};
use nearstore_core::topology::{DeviceDesc, DeviceKind, FabricTopology};
use nearstore_core::workload::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::engine::{Engine, EngineConfig, Sparsity};
use crate::error::Result;
use crate::fabric::{Fabric, Raid0Volume};
use crate::store::{bytes_to_f32, f32_to_bytes, ShardStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub work_dir: PathBuf,
    pub steps: u64,
    pub devices: usize,
    /// Overwrites stored bytes before the persisted-state check.
    pub corrupt_store: bool,
}

impl VerifyOptions {
    pub fn new(work_dir: PathBuf) -> Self {
        Self { work_dir, steps: 10, devices: 3, corrupt_store: false }
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<std::result::Result<String, String>>) {
        let (passed, detail) = match f() {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(Check { suite: self.name, name: name.into(), passed, detail });
    }
}

fn engine_config(mode: Mode, devices: usize, dir: &Path) -> EngineConfig {
    let kind = if mode.near_storage() { DeviceKind::Csd } else { DeviceKind::Ssd };
    // Small accelerator memory so every device runs several tasklets.
    let desc = DeviceDesc { kind, accel_mem_capacity: 64 << 10, ..DeviceDesc::csd() };
    EngineConfig::toy(mode, FabricTopology::uniform(desc, devices), dir.join(mode.name()))
}

fn first_mismatch(a: &[f32], b: &[f32]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| x.to_bits() != y.to_bits())
}

fn compare_shards(got: &OptimizerShard, want: &OptimizerShard) -> std::result::Result<(), String> {
    for (name, g, w) in [
        ("params32", &got.params32, &want.params32),
        ("momentum", &got.momentum, &want.momentum),
        ("variance", &got.variance, &want.variance),
    ] {
        if let Some(i) = first_mismatch(g, w) {
            return Err(format!("{name} differs at element {i}"));
        }
    }
    Ok(())
}

fn equivalence_suite(opts: &VerifyOptions) -> Suite {
    let mut s = Suite::new("oracle-equivalence");
    let dir = opts.work_dir.join("equivalence");
    let modes = [Mode::Base, Mode::Su, Mode::SuO];
    s.check(format!("base = su = su_o = in_memory at every step ({} steps)", opts.steps), || {
        let mut reference = Engine::new(engine_config(Mode::InMemory, opts.devices, &dir))?;
        let mut engines =
            modes.iter().map(|&m| Engine::new(engine_config(m, opts.devices, &dir))).collect::<Result<Vec<_>>>()?;
        for step in 0..opts.steps {
            let want = reference.train_step()?;
            let want_shard = reference.persisted_shard()?;
            for e in engines.iter_mut() {
                let got = e.train_step()?;
                let mode = e.config().mode;
                if got.loss.to_bits() != want.loss.to_bits() {
                    return Ok(Err(format!("{mode}: loss differs at step {step}")));
                }
                if e.params16() != reference.params16() {
                    return Ok(Err(format!("{mode}: fp16 params differ at step {step}")));
                }
                if let Err(d) = compare_shards(&e.persisted_shard()?, &want_shard) {
                    return Ok(Err(format!("{mode}: {d} at step {step}")));
                }
            }
        }
        Ok(Ok("bit-identical params, moments and losses".into()))
    });
    s.check("threaded su_o = deterministic su_o", || {
        let mut a = Engine::new(engine_config(Mode::SuO, opts.devices, &dir.join("det")))?;
        let mut cfg = engine_config(Mode::SuO, opts.devices, &dir.join("thr"));
        cfg.deterministic = false;
        let mut b = Engine::new(cfg)?;
        for _ in 0..opts.steps.min(3) {
            a.train_step()?;
            b.train_step()?;
        }
        Ok(compare_shards(&b.persisted_shard()?, &a.persisted_shard()?).map(|_| "identical shards".into()))
    });
    s.check("su_o_c keeping every entry = su", || {
        let mut su = Engine::new(engine_config(Mode::Su, opts.devices, &dir.join("su_ref")))?;
        let mut cfg = engine_config(Mode::SuOC, opts.devices, &dir.join("keep_all"));
        cfg.sparsity = Some(Sparsity::KeepAll);
        let mut c = Engine::new(cfg)?;
        for _ in 0..opts.steps.min(3) {
            su.train_step()?;
            c.train_step()?;
        }
        Ok(compare_shards(&c.persisted_shard()?, &su.persisted_shard()?).map(|_| "identical shards".into()))
    });
    s
}

fn corrupt(engine: &Engine) -> Result<()> {
    let Some(fabric) = engine.fabric() else { return Ok(()) };
    let path = fabric.store(0)?.path().to_path_buf();
    let mut f = std::fs::OpenOptions::new().write(true).open(&path).map_err(|e| crate::Error::io(&path, e))?;
    f.seek(SeekFrom::Start(0)).and_then(|_| f.write_all(&[0xff; 8])).map_err(|e| crate::Error::io(&path, e))
}

fn ledger_suite(opts: &VerifyOptions) -> Suite {
    let mut s = Suite::new("ledger");
    let dir = opts.work_dir.join("ledger");
    for mode in [Mode::Base, Mode::Su, Mode::SuO, Mode::SuOC] {
        s.check(format!("{mode}: iteration traffic matches the expected trace"), || {
            let mut e = Engine::new(engine_config(mode, opts.devices, &dir))?;
            let m = 2 * e.params16().len() as u64;
            let want = e.expected_trace()?.expect("budgeted sparsity has a trace").traffic(opts.devices);
            let got = e.train_step()?.traffic;
            if got != want {
                return Ok(Err("ledger and trace disagree".into()));
            }
            let (rd, wr) = (got.total(Edge::Host, Direction::Read), got.total(Edge::Host, Direction::Write));
            let (want_rd, want_wr) = match mode {
                Mode::Base => (8 * m, 8 * m),
                Mode::Su | Mode::SuO => (2 * m, 2 * m),
                _ => (2 * m, got.phase_total(Edge::Host, Direction::Write, Phase::Backward)),
            };
            if (rd, wr) != (want_rd, want_wr) {
                return Ok(Err(format!("host read/write {rd}/{wr}, expected {want_rd}/{want_wr}")));
            }
            Ok(Ok(format!("host read {rd} B, write {wr} B (M = {m} B)")))
        });
    }
    let label = if opts.corrupt_store { "su: persisted state equals the oracle (store corrupted)" } else { "su: persisted state equals the oracle" };
    s.check(label, || {
        let mut reference = Engine::new(engine_config(Mode::InMemory, opts.devices, &dir.join("ref")))?;
        let mut e = Engine::new(engine_config(Mode::Su, opts.devices, &dir.join("persist")))?;
        for _ in 0..opts.steps.min(5) {
            reference.train_step()?;
            e.train_step()?;
        }
        if opts.corrupt_store {
            corrupt(&e)?;
        }
        Ok(compare_shards(&e.persisted_shard()?, &reference.persisted_shard()?)
            .map(|_| "params32, momentum and variance files match".into())
            .map_err(|d| format!("persisted {d} (device files under {})", dir.join("persist").display())))
    });
    s.check("zero steps move no bytes", || {
        let cfg = ExperimentConfig { mode: Mode::Su, steps: 0, devices: opts.devices, ..Default::default() };
        let r = crate::experiment::run_experiment(&cfg, &dir.join("zero"))?;
        let (rd, wr) = r.host_bytes();
        Ok(if r.iterations.is_empty() && rd == 0 && wr == 0 { Ok("empty report".into()) } else { Err(format!("{rd}/{wr} bytes")) })
    });
    s
}

fn roundtrip_suite(opts: &VerifyOptions) -> Suite {
    let mut s = Suite::new("roundtrip");
    let dir = opts.work_dir.join("roundtrip");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
    s.check("fp32 bytes", || {
        let mut back = vec![0.0f32; values.len()];
        bytes_to_f32(&f32_to_bytes(&values), &mut back);
        Ok(match first_mismatch(&back, &values) {
            None => Ok(format!("{} values", values.len())),
            Some(i) => Err(format!("element {i} differs")),
        })
    });
    s.check("sparse gradient record", || {
        let dense: Vec<f16> = values.iter().map(|&v| narrow(v)).collect();
        let sg = compress_topk(&dense, 37)?;
        let back = SparseGradient::decode(&sg.encode())?;
        Ok(if back == sg { Ok(format!("k = {}, {} bytes", sg.k(), sg.encoded_len())) } else { Err("decoded record differs".into()) })
    });
    s.check("raid0 volume and manifest", || {
        let topo = FabricTopology::uniform(DeviceDesc::ssd(), 3);
        let fabric = Fabric::create(topo, &dir, &[4096; 3])?;
        let vol = Raid0Volume { stripe: 100, devices: 3 };
        let bytes = f32_to_bytes(&values);
        vol.write(&fabric, 8, &bytes)?;
        if vol.read(&fabric, Extent::new(8, bytes.len() as u64))? != bytes {
            return Ok(Err("striped read differs from write".into()));
        }
        let store = fabric.store(1)?;
        store.save_manifest()?;
        let m = ShardStore::load_manifest(&store.manifest_path())?;
        Ok(if m == store.manifest() { Ok("striped bytes and manifest roundtrip".into()) } else { Err("manifest differs".into()) })
    });
    s.check("experiment config", || {
        let cfg = ExperimentConfig { mode: Mode::SuOC, compression_pct: Some(2.0), ..Default::default() };
        let text = toml::to_string(&cfg).map_err(|e| crate::Error::Config(e.to_string()))?;
        let back: ExperimentConfig = toml::from_str(&text).map_err(|e| crate::Error::Config(e.to_string()))?;
        Ok(if back == cfg { Ok("toml".into()) } else { Err("config differs after toml roundtrip".into()) })
    });
    s
}

/// Runs all three suites.
pub fn run_all(opts: &VerifyOptions) -> Vec<Check> {
    [equivalence_suite(opts), ledger_suite(opts), roundtrip_suite(opts)].into_iter().flat_map(|s| s.checks).collect()
}

pub fn print_table(out: &mut impl std::io::Write, checks: &[Check]) -> std::io::Result<()> {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    writeln!(out, "{:<18} {:<width$}  result  detail", "suite", "check")?;
    for c in checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<18} {:<width$}  {verdict:<6}  {}", c.suite, c.name, c.detail)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {} failed", checks.len(), failed)
}

use nearstore::engine::{Engine, EngineConfig, Sparsity};
use nearstore_core::ledger::{Direction, Edge, Phase};
use nearstore_core::numerics::OptimizerConfig;
use nearstore_core::topology::{DeviceDesc, DeviceKind, FabricTopology};
use nearstore_core::workload::Mode;

fn config(mode: Mode, devices: usize, dir: &std::path::Path) -> EngineConfig {
    let kind = if mode.near_storage() { DeviceKind::Csd } else { DeviceKind::Ssd };
    // 64 KiB of accelerator memory forces many tasklets per device.
    let desc = DeviceDesc { kind, accel_mem_capacity: 64 << 10, ..DeviceDesc::csd() };
    EngineConfig::toy(mode, FabricTopology::uniform(desc, devices), dir.to_path_buf())
}

fn run(cfg: EngineConfig, iters: usize) -> Engine {
    let mut e = Engine::new(cfg).unwrap();
    for _ in 0..iters {
        e.train_step().unwrap();
    }
    e
}

#[test]
fn uncompressed_modes_agree_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let reference = run(config(Mode::InMemory, 3, &dir.path().join("mem")), 5);
    let want = reference.persisted_shard().unwrap();
    for mode in [Mode::Base, Mode::Su, Mode::SuO] {
        let e = run(config(mode, 3, &dir.path().join(mode.name())), 5);
        let got = e.persisted_shard().unwrap();
        assert_eq!(got.params32, want.params32, "{mode}");
        assert_eq!(got.momentum, want.momentum, "{mode}");
        assert_eq!(got.variance, want.variance, "{mode}");
        assert_eq!(e.params16(), reference.params16(), "{mode}");
    }
}

#[test]
fn threaded_schedule_matches_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(config(Mode::SuO, 4, &dir.path().join("a")), 3);
    let mut cfg = config(Mode::SuO, 4, &dir.path().join("b"));
    cfg.deterministic = false;
    let b = run(cfg, 3);
    assert_eq!(a.persisted_shard().unwrap(), b.persisted_shard().unwrap());
    assert_eq!(a.params16(), b.params16());
}

#[test]
fn keep_all_compression_equals_dense() {
    let dir = tempfile::tempdir().unwrap();
    let dense = run(config(Mode::Su, 2, &dir.path().join("su")), 4);
    let mut cfg = config(Mode::SuOC, 2, &dir.path().join("c"));
    cfg.sparsity = Some(Sparsity::KeepAll);
    let sparse = run(cfg, 4);
    assert_eq!(sparse.persisted_shard().unwrap().params32, dense.persisted_shard().unwrap().params32);
}

#[test]
fn near_storage_update_keeps_states_off_the_host_link() {
    let dir = tempfile::tempdir().unwrap();
    let n = 65536u64;
    let m = 2 * n;
    let mut su = Engine::new(config(Mode::Su, 2, &dir.path().join("su"))).unwrap();
    let r = su.train_step().unwrap();
    assert!(!r.skipped);
    let t = &r.traffic;
    assert_eq!(t.phase_total(Edge::Host, Direction::Write, Phase::Backward), 2 * m);
    assert_eq!(t.phase_total(Edge::Host, Direction::Read, Phase::Update), 2 * m);
    assert_eq!(t.phase_total(Edge::Host, Direction::Write, Phase::Update), 0);
    assert_eq!(t.total(Edge::Internal, Direction::Read), 8 * m);
    assert_eq!(t.total(Edge::Internal, Direction::Write), 6 * m);

    let mut base = Engine::new(config(Mode::Base, 2, &dir.path().join("base"))).unwrap();
    let t = base.train_step().unwrap().traffic;
    assert_eq!(t.total(Edge::Host, Direction::Read), 8 * m);
    assert_eq!(t.total(Edge::Host, Direction::Write), 8 * m);
    assert_eq!(t.total(Edge::Internal, Direction::Read), 0);
}

#[test]
fn compressed_offload_writes_exact_record_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(Mode::SuOC, 3, dir.path())).unwrap();
    let want = e.expected_trace().unwrap().unwrap().traffic(3);
    let got = e.train_step().unwrap().traffic;
    assert_eq!(got, want);
}

#[test]
fn traffic_matches_expected_trace_in_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Base, Mode::Su, Mode::SuO, Mode::SuOC] {
        let mut e = Engine::new(config(mode, 3, &dir.path().join(mode.name()))).unwrap();
        let want = e.expected_trace().unwrap().unwrap().traffic(3);
        for _ in 0..2 {
            let got = e.train_step().unwrap().traffic;
            assert_eq!(got, want, "{mode}");
        }
    }
}

#[test]
fn sgd_and_adagrad_run_in_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    for opt in [OptimizerConfig::sgd_momentum(1e-2, 0.9), OptimizerConfig::adagrad(1e-2)] {
        let mut mem = config(Mode::InMemory, 2, &dir.path().join("m"));
        mem.optimizer = opt;
        let want = run(mem, 3).persisted_shard().unwrap();
        for mode in [Mode::Base, Mode::SuO] {
            let mut cfg = config(mode, 2, &dir.path().join(mode.name()));
            cfg.optimizer = opt;
            assert_eq!(run(cfg, 3).persisted_shard().unwrap().params32, want.params32, "{mode} {:?}", opt.kind);
        }
    }
}

#[test]
fn near_storage_modes_reject_plain_ssds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Mode::Su, 2, dir.path());
    cfg.topology = cfg.topology.with_kind(DeviceKind::Ssd);
    assert!(Engine::new(cfg).is_err());
}

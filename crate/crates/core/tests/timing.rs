use nearstore_core::calibration::paper_like;
use nearstore_core::ledger::Phase;
use nearstore_core::numerics::{OptimizerKind, Variable};
use nearstore_core::sim::{simulate, summarize, Breakdown, SimConfig};
use nearstore_core::topology::{DeviceDesc, FabricTopology};
use nearstore_core::trace::Role;
use nearstore_core::workload::{build_iteration, Mode, WorkloadShape};

fn transfer_only(mode: Mode, devices: usize) -> (WorkloadShape, FabricTopology) {
    let desc = DeviceDesc { read_bw: 3.2e9, write_bw: 3.2e9, ..DeviceDesc::csd() };
    let blocks = 10;
    let shape = WorkloadShape {
        mode,
        optimizer: OptimizerKind::Adam,
        blocks: vec![100_000_000; blocks],
        devices,
        accel_mem_capacity: desc.accel_mem_capacity,
        host_subgroup_elems: 100_000_000,
        stripe_bytes: 1 << 20,
        compression_pct: None,
        forward_s: vec![0.0; blocks],
        backward_s: vec![0.0; blocks],
    };
    (shape, FabricTopology::uniform(desc, devices))
}

fn run(shape: &WorkloadShape, topo: &FabricTopology, sim: &SimConfig) -> Breakdown {
    summarize(&simulate(&build_iteration(shape).unwrap(), topo, sim).unwrap())
}

#[test]
fn base_update_speedup_is_tight_against_link_saturation_without_host_compute() {
    let sim = SimConfig { op_latency_s: 0.0, host_update_throughput: 1e18, chunk_bytes: 16 << 20, ..SimConfig::default() };
    let (s1, t1) = transfer_only(Mode::Base, 1);
    let one = run(&s1, &t1, &sim).update;
    for n in 2..=10 {
        let (s, t) = transfer_only(Mode::Base, n);
        let speedup = one / run(&s, &t, &sim).update;
        let law = (n as f64).min(16.0 / 3.2);
        assert!(speedup <= law * 1.001, "n={n}: {speedup} above {law}");
        assert!(speedup >= law * 0.95, "n={n}: {speedup} not within 5% of {law}");
    }
}

#[test]
fn calibrated_base_speedup_stays_under_the_saturation_bound() {
    let one = paper_like(Mode::Base, 1, 10.0).run().unwrap().1.update;
    for n in 2..=10 {
        let s = one / paper_like(Mode::Base, n, 10.0).run().unwrap().1.update;
        assert!(s <= (n as f64).min(5.0) * 1.001, "n={n}: {s}");
    }
}

#[test]
fn su_scales_with_private_links_when_accelerator_keeps_up() {
    let sim = SimConfig { op_latency_s: 0.0, ..SimConfig::default() };
    let (s1, t1) = transfer_only(Mode::Su, 1);
    let one = run(&s1, &t1, &sim).update;
    for n in 2..=10 {
        let (s, t) = transfer_only(Mode::Su, n);
        let speedup = one / run(&s, &t, &sim).update;
        assert!(speedup >= 0.9 * n as f64, "n={n}: {speedup}");
    }
}

#[test]
fn overlapped_handler_loads_next_tasklet_before_states_drain() {
    let sc = paper_like(Mode::SuO, 2, 10.0);
    let trace = build_iteration(&sc.shape).unwrap();
    let tl = simulate(&trace, &sc.topology, &sc.sim).unwrap();
    let span = |dev: usize, idx: usize, role: Role| {
        tl.span_of(|i| {
            let op = &trace.ops[i];
            op.role == role && op.tasklet.is_some_and(|t| t.device == dev && t.index == idx)
        })
    };
    let mut checked = 0;
    for idx in 0.. {
        let (Some(next_load), Some(state_wb)) = (span(0, idx + 1, Role::Load(Variable::Params)), span(0, idx, Role::Writeback(Variable::Variance))) else {
            break;
        };
        assert!(next_load.0 < state_wb.1, "tasklet {idx}: next load starts at {} after state writeback ends at {}", next_load.0, state_wb.1);
        checked += 1;
    }
    assert!(checked >= 2, "only {checked} tasklet pairs");

    let sc = paper_like(Mode::Su, 2, 10.0);
    let trace = build_iteration(&sc.shape).unwrap();
    let tl = simulate(&trace, &sc.topology, &sc.sim).unwrap();
    let load1 = tl.span_of(|i| trace.ops[i].role == Role::Load(Variable::Params) && trace.ops[i].tasklet.is_some_and(|t| t.device == 0 && t.index == 1)).unwrap();
    let wb0 = tl.span_of(|i| trace.ops[i].role == Role::Writeback(Variable::Variance) && trace.ops[i].tasklet.is_some_and(|t| t.device == 0 && t.index == 0)).unwrap();
    assert!(load1.0 >= wb0.1, "naive handler must finish tasklet 0 first");
}

#[test]
fn faster_links_never_slow_a_phase() {
    for mode in [Mode::Base, Mode::Su, Mode::SuO] {
        let (shape, topo) = transfer_only(mode, 3);
        let sim = SimConfig::default();
        let slow = run(&shape, &topo, &sim);
        for scale in [1.25, 2.0, 4.0] {
            let mut fast = topo.clone();
            fast.host_link_bw *= scale;
            for d in fast.devices.iter_mut() {
                d.read_bw *= scale;
                d.write_bw *= scale;
                d.internal_link_bw *= scale;
            }
            let b = run(&shape, &fast, &sim);
            for p in Phase::ALL {
                assert!(b.phase(p) <= slow.phase(p) * (1.0 + 1e-12), "{mode} x{scale} {p}: {} > {}", b.phase(p), slow.phase(p));
            }
        }
    }
}

#[test]
fn compression_ratio_sweep_never_increases_iteration_time() {
    let mut last = f64::INFINITY;
    for pct in [10.0, 8.0, 5.0, 2.0, 1.0] {
        let t = paper_like(Mode::SuOC, 6, pct).run().unwrap().1.total;
        assert!(t <= last, "{pct}%: {t} > {last}");
        last = t;
    }
}

#[test]
fn zero_compute_zero_bytes_gives_zero_breakdown() {
    let tl = simulate(&nearstore_core::trace::Trace::new(), &FabricTopology::uniform(DeviceDesc::csd(), 1), &SimConfig::default()).unwrap();
    assert_eq!(summarize(&tl), Breakdown::default());
}

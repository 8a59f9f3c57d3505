use nearstore_core::compression::{compress_topk, decompress_scatter, k_for_budget, SparseGradient};
use nearstore_core::f16;
use nearstore_core::layout::{partition_parameters, plan_subgroups, raid0_device_len, raid0_map, Extent};
use nearstore_core::ledger::Phase;
use nearstore_core::numerics::{apply_update_slices, OptimizerConfig, OptimizerKind};
use nearstore_core::sim::{simulate, Resource, SimConfig};
use nearstore_core::topology::{DeviceDesc, FabricTopology};
use nearstore_core::trace::{OpKind, Role, Trace, TraceOp};
use proptest::prelude::*;

fn finite_f16() -> impl Strategy<Value = f16> {
    (-6.0e4f32..6.0e4).prop_map(f16::from_f32)
}

/// Full sort by magnitude (ties to the lower index), keep the first k,
/// zero everything else.
fn topk_projection(dense: &[f16], k: usize) -> Vec<f32> {
    let mut idx: Vec<usize> = (0..dense.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ma, mb) = (dense[a].to_f32().abs(), dense[b].to_f32().abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; dense.len()];
    for &i in &idx[..k] {
        out[i] = dense[i].to_f32();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn topk_equals_sort_projection(dense in prop::collection::vec(finite_f16(), 1..200), kf in 0.0f64..1.0) {
        let k = 1 + ((dense.len() - 1) as f64 * kf) as usize;
        let sg = compress_topk(&dense, k).unwrap();
        prop_assert_eq!(sg.k(), k);
        let got = decompress_scatter(&sg, 7).unwrap();
        let want = topk_projection(&dense, k);
        prop_assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_size_does_not_matter(dense in prop::collection::vec(finite_f16(), 1..300), k in 1usize..40) {
        let k = k.min(dense.len());
        let sg = compress_topk(&dense, k).unwrap();
        let base = decompress_scatter(&sg, 1).unwrap();
        for s in [7, 64, 1000] {
            prop_assert_eq!(&decompress_scatter(&sg, s).unwrap(), &base);
        }
    }

    #[test]
    fn wire_roundtrip(dense in prop::collection::vec(finite_f16(), 1..100), k in 1usize..100) {
        let k = k.min(dense.len());
        let sg = compress_topk(&dense, k).unwrap();
        let bytes = sg.encode();
        prop_assert_eq!(bytes.len(), 16 + 6 * k);
        prop_assert_eq!(SparseGradient::decode(&bytes).unwrap(), sg);
    }

    #[test]
    fn budget_respected(len in 1usize..100_000, pct in 0.01f64..100.0) {
        let k = k_for_budget(len, pct);
        prop_assert!(k >= 1 && k <= len);
        if k > 1 {
            prop_assert!((16 + 6 * k) as f64 <= pct / 100.0 * (4 * len) as f64 + 1e-9);
        }
    }

    #[test]
    fn raid0_reassembles(offset in 0u64..5000, len in 1u64..5000, stripe in 1u64..300, n in 1usize..7) {
        // a byte pattern where each volume byte encodes its address
        let vol_len = offset + len;
        let volume: Vec<u8> = (0..vol_len).map(|i| (i * 31 % 251) as u8).collect();
        let mut devices: Vec<Vec<u8>> = (0..n).map(|_| vec![0u8; raid0_device_len(vol_len, stripe, n) as usize]).collect();
        // direct striping, written without the mapper
        for s in 0..vol_len.div_ceil(stripe) {
            let d = (s % n as u64) as usize;
            let local = (s / n as u64) * stripe;
            let lo = s * stripe;
            let hi = (lo + stripe).min(vol_len);
            devices[d][local as usize..(local + hi - lo) as usize].copy_from_slice(&volume[lo as usize..hi as usize]);
        }
        let mut got = Vec::new();
        for (d, e) in raid0_map(Extent::new(offset, len), stripe, n) {
            got.extend_from_slice(&devices[d][e.offset as usize..e.end() as usize]);
        }
        prop_assert_eq!(&got[..], &volume[offset as usize..]);
    }

    #[test]
    fn partition_covers(n in 1u64..100_000, d in 1usize..12) {
        let p = partition_parameters(n, d);
        let mut next = 0;
        for (i, &(dev, seg)) in p.segments.iter().enumerate() {
            prop_assert_eq!(dev, i);
            prop_assert_eq!(seg.offset, next);
            next = seg.end();
        }
        prop_assert_eq!(next, n);
        let lens: Vec<u64> = p.segments.iter().map(|s| s.1.len).collect();
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
    }

    #[test]
    fn subgroups_cover_and_fit(len in 1u64..10_000, cap in 16u64..100_000) {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum, OptimizerKind::Adagrad] {
            let ts = plan_subgroups(len, cap, kind).unwrap();
            let mut next = 0;
            for (i, t) in ts.iter().enumerate() {
                prop_assert_eq!(t.index, i);
                prop_assert_eq!(t.range.offset, next);
                prop_assert!(t.footprint_bytes(kind) <= cap);
                next = t.range.end();
            }
            prop_assert_eq!(next, len);
        }
    }
}

/// Textbook scalar recurrences, written out independently of the library.
fn oracle_step(kind: OptimizerKind, cfg: &OptimizerConfig, p: f32, m: f32, v: f32, g: f32, clip: f32, t: u64) -> (f32, f32, f32) {
    let g = clip * g;
    match kind {
        OptimizerKind::Adam => {
            let m2 = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            let v2 = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g);
            let mut b1t = 1.0f32;
            let mut b2t = 1.0f32;
            for _ in 0..t {
                b1t *= cfg.beta1;
                b2t *= cfg.beta2;
            }
            let (mh, vh) = if cfg.bias_correction { (m2 / (1.0 - b1t), v2 / (1.0 - b2t)) } else { (m2, v2) };
            (p - (cfg.lr * mh) / (vh.sqrt() + cfg.eps), m2, v2)
        }
        OptimizerKind::SgdMomentum => {
            let m2 = cfg.momentum_coef * m + g;
            (p - cfg.lr * m2, m2, v)
        }
        OptimizerKind::Adagrad => {
            let v2 = v + g * g;
            (p - (cfg.lr * g) / (v2.sqrt() + cfg.eps), m, v2)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn updater_matches_scalar_oracle(
        p in prop::collection::vec(-10.0f32..10.0, 1..32),
        seed in any::<u64>(),
        kind_ix in 0usize..3,
        t in 1u64..2000,
        clip in 0.01f32..=1.0,
        bc in any::<bool>(),
    ) {
        let kind = [OptimizerKind::Adam, OptimizerKind::SgdMomentum, OptimizerKind::Adagrad][kind_ix];
        let n = p.len();
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0 };
        let m: Vec<f32> = (0..n).map(|_| next()).collect();
        let v: Vec<f32> = (0..n).map(|_| next().abs()).collect();
        let g: Vec<f32> = (0..n).map(|_| next() * 3.0).collect();
        let cfg = OptimizerConfig { kind, lr: 0.01, bias_correction: bc, ..OptimizerConfig::default() };
        let (mut p2, mut m2, mut v2) = (p.clone(), m.clone(), v.clone());
        apply_update_slices(&mut p2, &mut m2, &mut v2, &g, &cfg, clip, t).unwrap();
        for i in 0..n {
            let (ep, em, ev) = oracle_step(kind, &cfg, p[i], m[i], v[i], g[i], clip, t);
            prop_assert_eq!(p2[i].to_bits(), ep.to_bits());
            prop_assert_eq!(m2[i].to_bits(), em.to_bits());
            prop_assert_eq!(v2[i].to_bits(), ev.to_bits());
        }
    }
}

fn reads(n: usize, bytes: u64) -> Trace {
    let mut t = Trace::new();
    for d in 0..n {
        t.push(TraceOp::new(OpKind::HostRead { device: d }, bytes, Phase::Update, Role::ParamsUpload));
    }
    t
}

#[test]
fn transfer_time_follows_min_of_device_and_link_bandwidth() {
    let cfg = SimConfig { chunk_bytes: 8 << 20, op_latency_s: 0.0, ..SimConfig::default() };
    let bytes = 4_000_000_000u64;
    for n in 1..=10 {
        let topo = FabricTopology::uniform(DeviceDesc::ssd(), n);
        let tl = simulate(&reads(n, bytes), &topo, &cfg).unwrap();
        let total = (n as u64 * bytes) as f64;
        let law = total / (n as f64 * 3.2e9).min(16e9);
        // one chunk of pipeline fill at most
        let slack = (8 << 20) as f64 / 3.2e9 + (8 << 20) as f64 / 16e9;
        assert!(tl.makespan >= law - 1e-9 && tl.makespan <= law + slack + 1e-9, "n={n}: {} vs {law}", tl.makespan);
        // every byte crosses the host link exactly once
        assert!((tl.busy_time(Resource::HostLink) - total / 16e9).abs() < 1e-6);
    }
}

#[test]
fn expansion_uplink_caps_its_group() {
    let cfg = SimConfig { chunk_bytes: 8 << 20, op_latency_s: 0.0, ..SimConfig::default() };
    let mut topo = FabricTopology::uniform(DeviceDesc::ssd(), 4);
    topo.expansion.push(nearstore_core::topology::ExpansionGroup { devices: vec![0, 1, 2, 3], uplink_bw: 4e9 });
    let tl = simulate(&reads(4, 1_000_000_000), &topo, &cfg).unwrap();
    assert!((tl.makespan - 1.0).abs() < 0.01, "{}", tl.makespan);
}

#[test]
fn more_bytes_never_finish_sooner() {
    let cfg = SimConfig::default();
    let topo = FabricTopology::uniform(DeviceDesc::csd(), 3);
    let mut last = 0.0;
    for gb in 1..6u64 {
        let tl = simulate(&reads(3, gb * 1_000_000_000), &topo, &cfg).unwrap();
        assert!(tl.makespan > last);
        last = tl.makespan;
    }
}

//! Built-in oracle suites, quick enough to run from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fixtures, parse_network, simulate, RunConfig};
use crate::fixedpoint::{Fixed, Lfsr, QFormat, Rounding, Saturation, WideAcc};
use crate::mem::{run_trace, AccessKind, MemRequest, MemoryConfig};
use crate::perf::{latency_seconds, plan_layer, AcceleratorConfig, DensityStats, Residency};
use crate::sparse::{align, compression_ratio, sparse_dot, BinaryMask, MaskedVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: u64,
    pub failures: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Default)]
struct Tally {
    cases: u64,
    failures: u64,
    first: Option<String>,
}

impl Tally {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn finish(self, name: &str) -> SuiteResult {
        SuiteResult { name: name.into(), cases: self.cases, failures: self.failures, first_failure: self.first }
    }
}

const Q: QFormat = QFormat::Q4_16;

fn compression_example() -> SuiteResult {
    let mut t = Tally::default();
    let dense: Vec<Fixed> = (0..16)
        .map(|i| Fixed::from_raw(if [1, 4, 5, 9, 12, 15].contains(&i) { i as i64 + 1 } else { 0 }, Q).unwrap())
        .collect();
    let mv = MaskedVector::compress(&dense, Q);
    let bits = mv.nnz() * 16 + mv.len();
    t.check(bits == 112, || format!("{bits} bits"));
    let r = compression_ratio(&mv, 16);
    t.check((r - 256.0 / 112.0).abs() < 1e-12, || format!("ratio {r}"));
    t.finish("compression_example")
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, density: f64) -> Vec<Fixed> {
    (0..len)
        .map(|_| {
            let raw = if rng.gen_bool(density) { rng.gen_range(-(1 << 17)..(1 << 17)) } else { 0 };
            Fixed::from_raw(raw, Q).unwrap()
        })
        .collect()
}

fn sparse_dense_dot(seed: u64) -> SuiteResult {
    let mut t = Tally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &d in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        for trial in 0..200u64 {
            let len = rng.gen_range(1..=64);
            let a = random_vector(&mut rng, len, d);
            let w = random_vector(&mut rng, len, d);
            let mut sat = Saturation::default();
            let mut acc = WideAcc::zero(Q);
            for (x, y) in a.iter().zip(&w) {
                acc = acc.add_raw(x.raw() as i128 * y.raw() as i128, &mut sat);
            }
            let key = seed ^ trial;
            let dense = acc.round(Rounding::Stochastic, &mut Lfsr::derive(key, 0, 0), &mut sat);
            let pair = align(&MaskedVector::compress(&a, Q), &MaskedVector::compress(&w, Q)).unwrap();
            let sparse = sparse_dot(&pair, Q, Rounding::Stochastic, &mut Lfsr::derive(key, 0, 0), &mut sat);
            t.check(dense == sparse, || format!("density {d}, trial {trial}: {dense:?} vs {sparse:?}"));
        }
    }
    t.finish("sparse_dense_dot")
}

fn align_exhaustive(max_len: usize) -> SuiteResult {
    let mut t = Tally::default();
    for len in 1..=max_len {
        for am in 0u64..(1 << len) {
            for wm in 0u64..(1 << len) {
                let vec_of = |m: u64, base: i64| -> Vec<Fixed> {
                    (0..len)
                        .map(|i| Fixed::from_raw(if m >> i & 1 == 1 { base + i as i64 } else { 0 }, Q).unwrap())
                        .collect()
                };
                let a = vec_of(am, 1);
                let w = vec_of(wm, 100);
                let pair = align(&MaskedVector::compress(&a, Q), &MaskedVector::compress(&w, Q)).unwrap();
                let keep: Vec<usize> = (0..len).filter(|&i| am >> i & 1 == 1 && wm >> i & 1 == 1).collect();
                let ok = pair.activations == keep.iter().map(|&i| a[i]).collect::<Vec<_>>()
                    && pair.weights == keep.iter().map(|&i| w[i]).collect::<Vec<_>>()
                    && pair.out_mask == BinaryMask::from_u64(am & wm, len);
                t.check(ok, || format!("len {len}, masks {am:#b} / {wm:#b}"));
            }
        }
    }
    t.finish("align_exhaustive")
}

fn stochastic_rounding(seed: u64) -> SuiteResult {
    let mut t = Tally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 20_000u32;
    let step = 1i64 << Q.fl();
    for v in 0..10 {
        let raw: i64 = rng.gen_range(-(3 << 32)..(3 << 32));
        let acc = WideAcc::from_raw(raw, Q).unwrap();
        let p = raw.rem_euclid(step) as f64 / step as f64;
        let floor = raw.div_euclid(step);
        let mut lfsr = Lfsr::new(rng.gen_range(1..=u32::MAX)).unwrap();
        let mut sat = Saturation::default();
        let ups = (0..draws)
            .filter(|_| acc.round_stochastic(&mut lfsr, &mut sat).raw() == floor + 1)
            .count() as f64;
        let freq = ups / draws as f64;
        let bound = 4.0 * (p * (1.0 - p) / draws as f64).sqrt() + 1e-9;
        t.check((freq - p).abs() <= bound, || format!("value {v}: frequency {freq}, expected {p}"));
    }
    t.finish("stochastic_rounding")
}

fn memory_decoupling(seed: u64) -> SuiteResult {
    let mut t = Tally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MemoryConfig::default();
    for trace in 0..20 {
        let mut reqs = Vec::new();
        let mut now = 0u64;
        for _ in 0..200 {
            now += rng.gen_range(0..20_000);
            let addr = rng.gen_range(0..4096u64) * cfg.row_bytes;
            let rows = rng.gen_range(1..=4u64);
            reqs.push(if rng.gen_bool(0.4) {
                MemRequest::write(addr, rows * cfg.row_bytes, now)
            } else {
                MemRequest::read(addr, rows * cfg.row_bytes, now)
            });
        }
        let (all, rep) = run_trace(cfg, &reqs, false).unwrap();
        let reads: Vec<MemRequest> = reqs.iter().copied().filter(|r| r.kind == AccessKind::Read).collect();
        let (only, _) = run_trace(cfg, &reads, false).unwrap();
        let with: Vec<u64> =
            reqs.iter().zip(&all).filter(|(r, _)| r.kind == AccessKind::Read).map(|(_, &c)| c).collect();
        t.check(with == only, || format!("trace {trace}: read completions moved"));
        t.check(rep.stats.refreshes == 0, || format!("trace {trace}: refreshes"));
    }
    let r = cfg.row_bytes;
    let (c, _) = run_trace(
        cfg,
        &[MemRequest::read(0, r, 0), MemRequest::read(0, r, 1_000_000), MemRequest::read(64 * r * 32, r, 2_000_000)],
        false,
    )
    .unwrap();
    let (hit, miss) = (c[1] - 1_000_000, c[2] - 2_000_000);
    t.check(hit < miss, || format!("hit {hit} ps, miss {miss} ps"));
    t.finish("memory_decoupling")
}

fn perf_identities() -> SuiteResult {
    let mut t = Tally::default();
    let cfg = AcceleratorConfig::default();
    let d = parse_network(fixtures::LENET).unwrap();
    let shapes = d.network().shapes(20).unwrap();
    for (i, ls) in shapes.iter().enumerate() {
        let plan = plan_layer(i, ls, &cfg, Residency::default()).unwrap();
        let ds = DensityStats::assumed(1.0, plan.dense_macs, crate::nn::Mode::Inference);
        let cost = crate::perf::estimate_layer(&plan, &ds, &cfg, &MemoryConfig::default(), crate::nn::Mode::Inference)
            .unwrap();
        let expect: u64 = plan.tiles.iter().map(|t| t.dense_macs.div_ceil(cfg.macs_per_cycle())).sum::<u64>()
            + plan.elementwise_ops.div_ceil(cfg.elementwise_per_cycle());
        t.check(cost.compute_cycles == expect, || format!("layer {i}: {} vs {expect}", cost.compute_cycles));
    }
    for mode in ["inference", "training"] {
        let cfg: RunConfig = serde_json::from_str(&format!("{{\"mode\":\"{mode}\"}}")).unwrap();
        let r = simulate(&d, &cfg, 0).unwrap();
        t.check(r.energy.total_fj == r.energy.parts_sum(), || format!("{mode}: energy closure"));
        let layer_sum: u64 = r.layers.iter().map(|l| l.cost.energy.total_fj).sum();
        t.check(layer_sum == r.energy.total_fj, || format!("{mode}: layer energy sum"));
        t.check(r.latency_s == latency_seconds(r.total_cycles, r.clock_hz), || format!("{mode}: latency"));
        t.check(r.power_w == r.energy_j / r.latency_s, || format!("{mode}: power"));
    }
    t.finish("perf_identities")
}

/// Runs every suite. Deterministic for a given seed.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        compression_example(),
        sparse_dense_dot(seed),
        align_exhaustive(8),
        stochastic_rounding(seed),
        memory_decoupling(seed),
        perf_identities(),
    ]
}

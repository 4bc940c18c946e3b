//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::shadow::{self, dims_of, Shadow};
use sparsim::fixedpoint::{quantize_nearest, Fixed, Lfsr, QFormat, Rounding, Saturation, WideAcc};
use sparsim::front::{dataset_for, fixtures, parse_network, simulate, train, DensitySetting, RunConfig};
use sparsim::mem::{run_trace, AccessKind, MemRequest, MemoryConfig};
use sparsim::nn::{
    batchnorm_backward, conv_backward, conv_forward, fc_backward, init_state, loss, pool_backward,
    BatchNormParams, ConvSpec, FcSpec, LossKind, Mode, OpStats, PoolKind, PoolSpec, RoundCtx, Target,
};
use sparsim::perf::{estimate_layer, latency_seconds, plan_layer, AcceleratorConfig, DensityStats, Residency, SimReport};
use sparsim::sparse::{align, compression_ratio, sparse_dot, MaskedTensor, MaskedVector, Shape};

type Check = Result<String, String>;

const Q: QFormat = QFormat::Q4_16;

fn fixed(raw: i64) -> Fixed {
    Fixed::from_raw(raw, Q).unwrap()
}

fn compression_example() -> Check {
    let dense: Vec<Fixed> =
        (0..16).map(|i| fixed(if [0, 3, 6, 7, 10, 14].contains(&i) { 100 + i } else { 0 })).collect();
    let mv = MaskedVector::compress(&dense, Q);
    let bits = mv.nnz() * 16 + mv.len();
    let ratio = compression_ratio(&mv, 16);
    let detail = format!("{} non-zeros, {bits} bits, ratio {ratio:.3}", mv.nnz());
    if mv.nnz() == 6 && bits == 112 && (ratio - 2.286).abs() <= 0.01 && mv.decompress() == dense {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Dense dot product straight from raw integers: sequential saturating
/// accumulation in the wide range, then one rounding.
fn oracle_dot(a: &[Fixed], w: &[Fixed], mode: Rounding, rng: &mut Lfsr) -> i64 {
    let fl = Q.fl();
    let (lo, hi) = (Q.wide_raw_min() as i128, Q.wide_raw_max() as i128);
    let mut acc: i128 = 0;
    for (x, y) in a.iter().zip(w) {
        acc = (acc + x.raw() as i128 * y.raw() as i128).clamp(lo, hi);
    }
    let floor = acc >> fl;
    let residue = (acc & ((1 << fl) - 1)) as u64;
    let up = match mode {
        Rounding::Nearest => residue >= 1 << (fl - 1),
        Rounding::Stochastic => (rng.next_bits(fl).unwrap() as u64) < residue,
    };
    (floor + up as i128).clamp(Q.raw_min() as i128, Q.raw_max() as i128) as i64
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, density: f64) -> Vec<Fixed> {
    (0..len).map(|_| fixed(if rng.gen_bool(density) { rng.gen_range(-(1 << 19)..(1 << 19)) } else { 0 })).collect()
}

fn sparse_dense_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0;
    let mut cases = 0;
    for &d in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        for trial in 0..1000u64 {
            let len = rng.gen_range(1..=200);
            let a = random_vector(&mut rng, len, d);
            let w = random_vector(&mut rng, len, d);
            let pair = align(&MaskedVector::compress(&a, Q), &MaskedVector::compress(&w, Q)).unwrap();
            for mode in [Rounding::Nearest, Rounding::Stochastic] {
                let expect = oracle_dot(&a, &w, mode, &mut Lfsr::derive(trial, 0, len as u64));
                let mut sat = Saturation::default();
                let got = sparse_dot(&pair, Q, mode, &mut Lfsr::derive(trial, 0, len as u64), &mut sat);
                cases += 1;
                if got.raw() != expect {
                    failures += 1;
                }
            }
        }
    }
    let detail = format!("{cases} cases, {failures} mismatches");
    if failures == 0 { Ok(detail) } else { Err(detail) }
}

fn align_exhaustive() -> Check {
    let mut cases = 0u64;
    let mut failures = 0u64;
    for len in 1..=10usize {
        for am in 0u64..(1 << len) {
            let a: Vec<Fixed> = (0..len).map(|i| fixed(if am >> i & 1 == 1 { 1 + i as i64 } else { 0 })).collect();
            let ca = MaskedVector::compress(&a, Q);
            for wm in 0u64..(1 << len) {
                let w: Vec<Fixed> =
                    (0..len).map(|i| fixed(if wm >> i & 1 == 1 { -50 - i as i64 } else { 0 })).collect();
                let pair = align(&ca, &MaskedVector::compress(&w, Q)).unwrap();
                let keep: Vec<usize> = (0..len).filter(|&i| !a[i].is_zero() && !w[i].is_zero()).collect();
                let ok = pair.activations.iter().copied().eq(keep.iter().map(|&i| a[i]))
                    && pair.weights.iter().copied().eq(keep.iter().map(|&i| w[i]))
                    && (0..len).all(|i| pair.out_mask.get(i) == keep.contains(&i))
                    && pair.out_mask.len() == len;
                cases += 1;
                failures += !ok as u64;
            }
        }
    }
    let detail = format!("{cases} mask pairs, {failures} mismatches");
    if failures == 0 { Ok(detail) } else { Err(detail) }
}

fn stochastic_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 100_000u32;
    let step = 1i64 << Q.fl();
    let eps = Q.epsilon();
    let mut worst = 0.0f64;
    for v in 0..50 {
        let raw: i64 = rng.gen_range(-(5i64 << 32)..(5i64 << 32));
        let acc = WideAcc::from_raw(raw, Q).unwrap();
        let p = raw.rem_euclid(step) as f64 / step as f64;
        let floor = raw.div_euclid(step);
        let mut lfsr = Lfsr::new(rng.gen_range(1..=u32::MAX)).unwrap();
        let mut sat = Saturation::default();
        let (mut ups, mut sum) = (0u64, 0.0);
        for _ in 0..draws {
            let r = acc.round_stochastic(&mut lfsr, &mut sat);
            ups += (r.raw() == floor + 1) as u64;
            sum += r.to_f64();
        }
        let bound = 4.0 * (p * (1.0 - p) / draws as f64).sqrt();
        let freq = ups as f64 / draws as f64;
        let bias = sum / draws as f64 - acc.to_f64();
        if (freq - p).abs() > bound + 1e-12 || bias.abs() > bound * eps + 1e-12 {
            return Err(format!("value {v}: frequency {freq:.5} vs {p:.5}, mean bias {bias:e}"));
        }
        if bound > 0.0 {
            worst = worst.max((freq - p).abs() / bound);
        }
    }
    Ok(format!("50 values x {draws} draws, worst deviation {worst:.2} of bound"))
}

// ---- gradient checks ----

const FD_STEP: f64 = 1e-6;

fn qtensor(values: &[f64], shape: Shape) -> MaskedTensor {
    let d: Vec<Fixed> = values.iter().map(|&v| quantize_nearest(v, Q).unwrap()).collect();
    MaskedTensor::from_dense(shape, Q, &d).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Central difference of `f` with respect to each entry of `at`.
fn numeric_grad(at: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            x[i] = at[i] + FD_STEP;
            let up = f(&x);
            x[i] = at[i] - FD_STEP;
            let down = f(&x);
            x[i] = at[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn weighted(y: &[f64], g: &[f64]) -> f64 {
    y.iter().zip(g).map(|(a, b)| a * b).sum()
}

/// Number of entries outside `max(1e-3 * |fd|, 2 eps)`.
fn mismatches(analytic: &MaskedTensor, fd: &[f64]) -> usize {
    let tol_abs = 2.0 * Q.epsilon();
    analytic.to_f64().iter().zip(fd).filter(|(a, f)| (*a - *f).abs() > (1e-3 * f.abs()).max(tol_abs)).count()
}

fn grad_ctx(trial: u64) -> RoundCtx {
    RoundCtx::new(Q, Rounding::Stochastic, trial)
}

fn check_conv(rng: &mut ChaCha8Rng, trial: u64) -> usize {
    let (r, s) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let spec = ConvSpec {
        n: rng.gen_range(1..=2),
        k: rng.gen_range(1..=3),
        c: rng.gen_range(1..=3),
        h: rng.gen_range(r..=8),
        w: rng.gen_range(s..=8),
        r,
        s,
        u: rng.gen_range(1..=2),
        v: rng.gen_range(1..=2),
        pad_h: rng.gen_range(0..r),
        pad_w: rng.gen_range(0..s),
    };
    let xs = spec.input_shape();
    let ws = spec.weight_shape();
    let os = spec.output_shape();
    let x = qtensor(&uniform(rng, xs.len(), 1.0), xs);
    let w = qtensor(&uniform(rng, ws.len(), 0.5), ws);
    let g = qtensor(&uniform(rng, os.len(), 0.05), os);
    let (xf, wf, gf) = (x.to_f64(), w.to_f64(), g.to_f64());
    let (gi, gw) = conv_backward(&g, &x, &w, &spec, true, &grad_ctx(trial), &mut OpStats::default()).unwrap();
    let fd_x = numeric_grad(&xf, |v| weighted(&shadow::conv(v, &wf, &spec), &gf));
    let fd_w = numeric_grad(&wf, |v| weighted(&shadow::conv(&xf, v, &spec), &gf));
    mismatches(&gi, &fd_x) + mismatches(&gw, &fd_w)
}

fn check_fc(rng: &mut ChaCha8Rng, trial: u64) -> usize {
    let batch = rng.gen_range(1..=2);
    let spec = FcSpec { m: rng.gen_range(1..=10), n: rng.gen_range(1..=3 * 8 * 8), bias: rng.gen_bool(0.5) };
    let x = qtensor(&uniform(rng, batch * spec.n, 1.0), spec.input_shape(batch));
    let w = qtensor(&uniform(rng, spec.m * spec.n, 0.25), spec.weight_shape());
    let b = qtensor(&uniform(rng, spec.m, 0.5), spec.bias_shape());
    let g = qtensor(&uniform(rng, batch * spec.m, 0.05), spec.output_shape(batch));
    let (xf, wf, bf, gf) = (x.to_f64(), w.to_f64(), b.to_f64(), g.to_f64());
    let grads = fc_backward(&g, &x, &w, &spec, true, &grad_ctx(trial), &mut OpStats::default()).unwrap();
    let bias = spec.bias.then_some(bf.as_slice());
    let fd_x = numeric_grad(&xf, |v| weighted(&shadow::fc(v, &wf, bias, &spec, batch), &gf));
    let fd_w = numeric_grad(&wf, |v| weighted(&shadow::fc(&xf, v, bias, &spec, batch), &gf));
    let fd_b = numeric_grad(&bf, |v| weighted(&shadow::fc(&xf, &wf, Some(v), &spec, batch), &gf));
    mismatches(&grads.grad_input, &fd_x)
        + mismatches(&grads.grad_weights, &fd_w)
        + if spec.bias { mismatches(&grads.grad_bias, &fd_b) } else { 0 }
}

fn check_bn(rng: &mut ChaCha8Rng, trial: u64) -> usize {
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let c = shape.c();
    let x = qtensor(&uniform(rng, shape.len(), 1.0), shape);
    let g = qtensor(&uniform(rng, shape.len(), 0.05), shape);
    let mut params = BatchNormParams::identity(c, Q, 0.9).unwrap();
    params.gamma = qtensor(&uniform(rng, c, 1.0), BatchNormParams::param_shape(c));
    params.beta = qtensor(&uniform(rng, c, 1.0), BatchNormParams::param_shape(c));
    let (xf, gf) = (x.to_f64(), g.to_f64());
    let (gamma, beta) = (params.gamma.to_f64(), params.beta.to_f64());
    let dims = dims_of(shape);
    let grads = batchnorm_backward(&g, &x, &params, &grad_ctx(trial), &mut OpStats::default()).unwrap();
    let fd_x = numeric_grad(&xf, |v| weighted(&shadow::bn_train(v, dims, &gamma, &beta), &gf));
    let fd_g = numeric_grad(&gamma, |v| weighted(&shadow::bn_train(&xf, dims, v, &beta), &gf));
    let fd_b = numeric_grad(&beta, |v| weighted(&shadow::bn_train(&xf, dims, &gamma, v), &gf));
    mismatches(&grads.grad_input, &fd_x) + mismatches(&grads.grad_gamma, &fd_g) + mismatches(&grads.grad_beta, &fd_b)
}

fn check_pool(rng: &mut ChaCha8Rng, trial: u64) -> usize {
    let window = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=3);
    let extent = |rng: &mut ChaCha8Rng| window + stride * rng.gen_range(0..=(8 - window) / stride);
    let kind = [PoolKind::Max, PoolKind::Min, PoolKind::Mean][rng.gen_range(0..3)];
    let spec = PoolSpec { kind, window, stride };
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), extent(rng), extent(rng));
    // Distinct values keep every window's extreme unique.
    let mut order: Vec<usize> = (0..shape.len()).collect();
    order.shuffle(rng);
    let vals: Vec<f64> = order.iter().map(|&i| (i as f64 + 0.5) / shape.len() as f64 * 2.0 - 1.0).collect();
    let x = qtensor(&vals, shape);
    let os = spec.output_shape(shape).unwrap();
    let g = qtensor(&uniform(rng, os.len(), 0.05), os);
    let (xf, gf) = (x.to_f64(), g.to_f64());
    let gi = pool_backward(&g, &x, &spec, &grad_ctx(trial), &mut OpStats::default()).unwrap();
    let fd = numeric_grad(&xf, |v| weighted(&shadow::pool(v, dims_of(shape), &spec), &gf));
    mismatches(&gi, &fd)
}

fn check_loss(rng: &mut ChaCha8Rng, trial: u64) -> usize {
    let kind = [LossKind::L1, LossKind::L2, LossKind::SoftmaxXent][rng.gen_range(0..3)];
    let (batch, k) = (rng.gen_range(1..=8), rng.gen_range(2..=10));
    let shape = Shape::new(batch, 1, 1, k);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..k)).collect();
    // Keep L1 away from its kink at p == t.
    let vals: Vec<f64> = (0..shape.len())
        .map(|i| {
            let t = (i % k == labels[i / k]) as u8 as f64;
            let v: f64 = rng.gen_range(-2.0..2.0);
            if (v - t).abs() < 1e-3 { v + 1e-2 } else { v }
        })
        .collect();
    let p = qtensor(&vals, shape);
    let pf = p.to_f64();
    let (_, grad) = loss(&p, &Target::Classes(labels.clone()), kind, &grad_ctx(trial), &mut OpStats::default()).unwrap();
    let fd = numeric_grad(&pf, |v| shadow::loss(v, k, &labels, kind));
    mismatches(&grad, &fd)
}

fn gradient_checks() -> Check {
    type Op = fn(&mut ChaCha8Rng, u64) -> usize;
    let ops: [(&str, Op); 5] =
        [("conv", check_conv), ("fc", check_fc), ("batchnorm", check_bn), ("pool", check_pool), ("loss", check_loss)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parts = Vec::new();
    let mut total = 0;
    for (name, op) in ops {
        let bad: usize = (0..100).map(|t| (op(&mut rng, t) > 0) as usize).sum();
        total += bad;
        parts.push(format!("{name} {bad}/100"));
    }
    let detail = format!("failing trials: {}", parts.join(", "));
    if total == 0 { Ok(detail) } else { Err(detail) }
}

// ---- training ----

fn shadow_accuracy(desc: &sparsim::front::NetworkDescription, cfg: &RunConfig, seed: u64) -> f64 {
    let net = desc.network();
    let batch = cfg.batch.unwrap_or_else(|| desc.batch_for(Mode::Training));
    let (train_set, test_set) = dataset_for(&net, cfg.samples, seed).unwrap().split_tail(cfg.test_samples);
    let init = init_state(&net, cfg.qformat(), cfg.rounding, cfg.lr, seed).unwrap();
    let mut sh = Shadow::from_state(&net, &init, cfg.lr);
    let per_epoch = train_set.len() / batch;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
        for pos in 0..per_epoch {
            let idx = &order[pos * batch..(pos + 1) * batch];
            let x: Vec<f64> = idx.iter().flat_map(|&i| train_set.sample(i).iter().copied()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            sh.train_step(&x, &labels);
        }
    }
    let idx: Vec<usize> = (0..test_set.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch) {
        let x: Vec<f64> = chunk.iter().flat_map(|&i| test_set.sample(i).iter().copied()).collect();
        let pred = sh.predict(&x, chunk.len());
        correct += pred.iter().zip(chunk).filter(|(p, &i)| **p == test_set.labels[i]).count();
    }
    correct as f64 / test_set.len() as f64
}

fn desk_training() -> Check {
    let desc = parse_network(fixtures::LENET).unwrap();
    let seed = desc.seed.unwrap_or(0);
    let base = RunConfig { mode: Mode::Training, samples: 2000, epochs: 5, ..RunConfig::default() };
    let wide = RunConfig { qformat: Some(QFormat::Q4_16), rounding: Rounding::Stochastic, ..base.clone() };
    let narrow = RunConfig { qformat: Some(QFormat::Q4_8), rounding: Rounding::Nearest, ..base.clone() };
    let oracle = shadow_accuracy(&desc, &wide, seed);
    let acc16 = train(&desc, &wide, seed).map_err(|e| e.to_string())?.summary.test_accuracy;
    let acc8 = train(&desc, &narrow, seed).map_err(|e| e.to_string())?.summary.test_accuracy;
    let detail = format!("real {oracle:.4}, Q4.16 stochastic {acc16:.4}, Q4.8 nearest {acc8:.4}");
    if (oracle - acc16).abs() <= 0.02 && oracle - acc8 > oracle - acc16 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- performance model ----

fn report_identities(r: &SimReport) -> Result<(), String> {
    let e = &r.energy;
    let ok = e.total_fj == e.parts_sum()
        && r.layers.iter().map(|l| l.cost.energy.total_fj).sum::<u64>() == e.total_fj
        && r.layers.iter().all(|l| l.cost.energy.total_fj == l.cost.energy.parts_sum())
        && r.layers.iter().map(|l| l.cost.total_cycles).sum::<u64>() == r.total_cycles
        && r.layers.iter().all(|l| {
            l.cost.total_cycles == l.cost.compute_cycles.max(l.cost.memory_cycles) + l.cost.fill_cycles
        })
        && r.latency_s == latency_seconds(r.total_cycles, r.clock_hz)
        && r.energy_j == e.total_fj as f64 * 1e-15
        && r.power_w == if r.latency_s > 0.0 { r.energy_j / r.latency_s } else { 0.0 };
    if ok { Ok(()) } else { Err(format!("{} {:?} {}: identity violated", r.network, r.mode, r.density_source)) }
}

fn perf_oracles() -> Check {
    let cfg = AcceleratorConfig::default();
    let per_cycle = cfg.macs_per_cycle();
    if per_cycle != 64 * 72 * 16 {
        return Err(format!("{per_cycle} MACs per cycle"));
    }
    let mut tiles = 0;
    for (_, text) in fixtures::ALL {
        let net = parse_network(text).unwrap().network();
        for (i, ls) in net.shapes(100).unwrap().iter().enumerate() {
            let plan = plan_layer(i, ls, &cfg, Residency::default()).map_err(|e| e.to_string())?;
            let ds = DensityStats::assumed(1.0, plan.dense_macs, Mode::Inference);
            let cost = estimate_layer(&plan, &ds, &cfg, &MemoryConfig::default(), Mode::Inference)
                .map_err(|e| e.to_string())?;
            let expect: u64 = plan.tiles.iter().map(|t| t.dense_macs.div_ceil(per_cycle)).sum::<u64>()
                + plan.elementwise_ops.div_ceil(cfg.elementwise_per_cycle());
            tiles += plan.tiles.len();
            if cost.compute_cycles != expect {
                return Err(format!("{} layer {i}: {} compute cycles, expected {expect}", net.name, cost.compute_cycles));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut dense, mut aligned) = (0u64, 0u64);
    for trial in 0..8 {
        let spec = ConvSpec { n: 2, k: 16, c: 8, h: 12, w: 12, r: 3, s: 3, u: 1, v: 1, pad_h: 0, pad_w: 0 };
        let mut masked = |shape: Shape| {
            let v: Vec<f64> = (0..shape.len()).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.1..0.5) } else { 0.0 }).collect();
            qtensor(&v, shape)
        };
        let x = masked(spec.input_shape());
        let w = masked(spec.weight_shape());
        let mut st = OpStats::default();
        conv_forward(&x, &w, &spec, &grad_ctx(trial), &mut st).unwrap();
        dense += st.dense_macs;
        aligned += st.aligned_macs;
    }
    let frac = aligned as f64 / dense as f64;

    let mut reports = 0;
    for (_, text) in fixtures::ALL {
        let d = parse_network(text).unwrap();
        for mode in [Mode::Inference, Mode::Training] {
            let mut settings = vec![DensitySetting::Assumed(1.0), DensitySetting::Assumed(0.5), DensitySetting::Assumed(0.1)];
            if d.name == "lenet" {
                settings.push(DensitySetting::Measured);
            }
            for density in settings {
                let rc = RunConfig { mode, density, ..RunConfig::default() };
                report_identities(&simulate(&d, &rc, 1).map_err(|e| e.to_string())?)?;
                reports += 1;
            }
        }
    }
    let detail = format!("{tiles} tiles match, random 50/50 masks align {:.1}% of dense, {reports} reports close", frac * 100.0);
    if (frac - 0.25).abs() <= 0.05 { Ok(detail) } else { Err(detail) }
}

fn memory_decoupling() -> Check {
    let cfg = MemoryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trace in 0..100 {
        let mut reqs = Vec::new();
        let mut now = 0u64;
        for _ in 0..300 {
            now += rng.gen_range(0..30_000);
            let addr = rng.gen_range(0..8192u64) * cfg.row_bytes;
            let bytes = rng.gen_range(1..=4u64) * cfg.row_bytes;
            reqs.push(if rng.gen_bool(0.4) { MemRequest::write(addr, bytes, now) } else { MemRequest::read(addr, bytes, now) });
        }
        let (all, rep) = run_trace(cfg, &reqs, false).map_err(|e| e.to_string())?;
        let reads: Vec<MemRequest> = reqs.iter().copied().filter(|r| r.kind == AccessKind::Read).collect();
        let (only, rep_reads) = run_trace(cfg, &reads, false).map_err(|e| e.to_string())?;
        let with: Vec<u64> = reqs.iter().zip(&all).filter(|(r, _)| r.kind == AccessKind::Read).map(|(_, &c)| c).collect();
        if with != only {
            return Err(format!("trace {trace}: read completions moved when writes were removed"));
        }
        if rep.stats.refreshes != 0 || rep_reads.stats.refreshes != 0 {
            return Err(format!("trace {trace}: refresh events"));
        }
    }
    let r = cfg.row_bytes;
    let (c, _) = run_trace(
        cfg,
        &[MemRequest::read(0, r, 0), MemRequest::read(0, r, 1_000_000), MemRequest::read(64 * 32 * r, r, 2_000_000)],
        false,
    )
    .map_err(|e| e.to_string())?;
    let (hit, miss) = (c[1] - 1_000_000, c[2] - 2_000_000);
    let detail = format!("100 traces unchanged, hit {hit} ps < miss {miss} ps, no refreshes");
    if hit < miss { Ok(detail) } else { Err(detail) }
}

fn speedup(text: &str) -> Result<f64, String> {
    let d = parse_network(text).unwrap();
    let run = |density| {
        let rc = RunConfig { density: DensitySetting::Assumed(density), batch: Some(100), ..RunConfig::default() };
        simulate(&d, &rc, 0).map(|r| r.total_cycles).map_err(|e| e.to_string())
    };
    Ok(run(1.0)? as f64 / run(0.5)? as f64)
}

fn light_vs_large_fc() -> Check {
    let light = speedup(fixtures::MOBILENET_BOTTLENECK)?;
    let large = speedup(fixtures::VGG_FC)?;
    let detail = format!("speedup at 50% density: mobilenet_bottleneck {light:.3}, vgg_fc {large:.3}");
    if light > large { Ok(detail) } else { Err(detail) }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("compression example", compression_example),
        ("sparse/dense bit-exact dot", sparse_dense_equivalence),
        ("exhaustive alignment", align_exhaustive),
        ("stochastic rounding statistics", stochastic_statistics),
        ("gradient checks", gradient_checks),
        ("desk-scale training", desk_training),
        ("performance-model oracles", perf_oracles),
        ("memory read/write decoupling", memory_decoupling),
        ("light network speeds up more", light_vs_large_fc),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS {}. {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {}. {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

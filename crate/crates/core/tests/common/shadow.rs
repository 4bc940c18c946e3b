//! Real-arithmetic reference network: the same layer geometry evaluated in
//! `f64`, with textbook backward passes and plain SGD.

use sparsim::sparse::Shape;
use sparsim::nn::{
    ConvSpec, FcSpec, LayerOp, LayerParams, LossKind, Network, PoolKind, PoolSpec, ScalarOp, TrainState,
};

pub const BN_EPS: f64 = 1.0 / 1024.0;

pub fn dims_of(s: Shape) -> [usize; 4] {
    [s.n(), s.c(), s.h(), s.w()]
}

pub fn conv(x: &[f64], w: &[f64], s: &ConvSpec) -> Vec<f64> {
    let (p, q) = (s.p(), s.q());
    let mut y = vec![0.0; s.n * s.k * p * q];
    for n in 0..s.n {
        for k in 0..s.k {
            for pi in 0..p {
                for qi in 0..q {
                    let mut acc = 0.0;
                    for c in 0..s.c {
                        for r in 0..s.r {
                            for t in 0..s.s {
                                let h = (pi * s.u + r) as isize - s.pad_h as isize;
                                let ww = (qi * s.v + t) as isize - s.pad_w as isize;
                                if h < 0 || ww < 0 || h >= s.h as isize || ww >= s.w as isize {
                                    continue;
                                }
                                let xi = ((n * s.c + c) * s.h + h as usize) * s.w + ww as usize;
                                let wi = ((k * s.c + c) * s.r + r) * s.s + t;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    y[((n * s.k + k) * p + pi) * q + qi] = acc;
                }
            }
        }
    }
    y
}

/// Returns (grad_input, grad_weights).
pub fn conv_back(gy: &[f64], x: &[f64], w: &[f64], s: &ConvSpec) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = (s.p(), s.q());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..s.n {
        for k in 0..s.k {
            for pi in 0..p {
                for qi in 0..q {
                    let g = gy[((n * s.k + k) * p + pi) * q + qi];
                    for c in 0..s.c {
                        for r in 0..s.r {
                            for t in 0..s.s {
                                let h = (pi * s.u + r) as isize - s.pad_h as isize;
                                let ww = (qi * s.v + t) as isize - s.pad_w as isize;
                                if h < 0 || ww < 0 || h >= s.h as isize || ww >= s.w as isize {
                                    continue;
                                }
                                let xi = ((n * s.c + c) * s.h + h as usize) * s.w + ww as usize;
                                let wi = ((k * s.c + c) * s.r + r) * s.s + t;
                                gx[xi] += g * w[wi];
                                gw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

pub fn fc(x: &[f64], w: &[f64], b: Option<&[f64]>, s: &FcSpec, batch: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * s.m];
    for n in 0..batch {
        for i in 0..s.m {
            let mut acc = b.map(|b| b[i]).unwrap_or(0.0);
            for j in 0..s.n {
                acc += w[i * s.n + j] * x[n * s.n + j];
            }
            y[n * s.m + i] = acc;
        }
    }
    y
}

/// Returns (grad_input, grad_weights, grad_bias).
pub fn fc_back(gy: &[f64], x: &[f64], w: &[f64], s: &FcSpec, batch: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; batch * s.n];
    let mut gw = vec![0.0; s.m * s.n];
    let mut gb = vec![0.0; s.m];
    for n in 0..batch {
        for i in 0..s.m {
            let g = gy[n * s.m + i];
            gb[i] += g;
            for j in 0..s.n {
                gx[n * s.n + j] += g * w[i * s.n + j];
                gw[i * s.n + j] += g * x[n * s.n + j];
            }
        }
    }
    (gx, gw, gb)
}

/// `[n, c, h, w]` input, exact tiling assumed.
pub fn pool(x: &[f64], dims: [usize; 4], s: &PoolSpec) -> Vec<f64> {
    pool_impl(x, dims, s).0
}

fn pool_impl(x: &[f64], [n, c, h, w]: [usize; 4], s: &PoolSpec) -> (Vec<f64>, Vec<usize>) {
    let ph = (h - s.window) / s.stride + 1;
    let pw = (w - s.window) / s.stride + 1;
    let mut y = Vec::with_capacity(n * c * ph * pw);
    let mut pick = Vec::with_capacity(y.capacity());
    for plane in 0..n * c {
        for i in 0..ph {
            for j in 0..pw {
                let mut best = usize::MAX;
                let mut sum = 0.0;
                for a in 0..s.window {
                    for b in 0..s.window {
                        let xi = plane * h * w + (i * s.stride + a) * w + j * s.stride + b;
                        sum += x[xi];
                        let better = match s.kind {
                            PoolKind::Max => best == usize::MAX || x[xi] > x[best],
                            PoolKind::Min => best == usize::MAX || x[xi] < x[best],
                            PoolKind::Mean => best == usize::MAX,
                        };
                        if better {
                            best = xi;
                        }
                    }
                }
                y.push(match s.kind {
                    PoolKind::Mean => sum / (s.window * s.window) as f64,
                    _ => x[best],
                });
                pick.push(best);
            }
        }
    }
    (y, pick)
}

pub fn pool_back(gy: &[f64], x: &[f64], dims: [usize; 4], s: &PoolSpec) -> Vec<f64> {
    let (_, pick) = pool_impl(x, dims, s);
    let [_, _, h, w] = dims;
    let pw = (w - s.window) / s.stride + 1;
    let ph = (h - s.window) / s.stride + 1;
    let mut gx = vec![0.0; x.len()];
    for (o, &g) in gy.iter().enumerate() {
        match s.kind {
            PoolKind::Mean => {
                let plane = o / (ph * pw);
                let (i, j) = ((o / pw) % ph, o % pw);
                for a in 0..s.window {
                    for b in 0..s.window {
                        gx[plane * h * w + (i * s.stride + a) * w + j * s.stride + b] +=
                            g / (s.window * s.window) as f64;
                    }
                }
            }
            _ => gx[pick[o]] += g,
        }
    }
    gx
}

/// Training-mode batch norm with biased batch variance.
pub fn bn_train(x: &[f64], [n, c, h, w]: [usize; 4], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let (mean, var) = bn_stats(x, [n, c, h, w]);
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / (h * w)) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + BN_EPS).sqrt() + beta[ch]
        })
        .collect()
}

pub fn bn_stats(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, &v) in x.iter().enumerate() {
        mean[(i / (h * w)) % c] += v / m;
    }
    for (i, &v) in x.iter().enumerate() {
        let ch = (i / (h * w)) % c;
        var[ch] += (v - mean[ch]).powi(2) / m;
    }
    (mean, var)
}

/// Batch-mean loss against one-hot classes.
pub fn loss(pred: &[f64], k: usize, labels: &[usize], kind: LossKind) -> f64 {
    loss_and_grad(pred, k, labels, kind).0
}

pub fn loss_and_grad(pred: &[f64], k: usize, labels: &[usize], kind: LossKind) -> (f64, Vec<f64>) {
    let nb = labels.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (n, row) in pred.chunks(k).enumerate() {
        let t = |i: usize| if i == labels[n] { 1.0 } else { 0.0 };
        match kind {
            LossKind::L2 => {
                for i in 0..k {
                    value += (row[i] - t(i)).powi(2) / (2.0 * nb);
                    grad[n * k + i] = (row[i] - t(i)) / nb;
                }
            }
            LossKind::L1 => {
                for i in 0..k {
                    let d = row[i] - t(i);
                    value += d.abs() / nb;
                    grad[n * k + i] = d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / nb;
                }
            }
            LossKind::SoftmaxXent => {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                for i in 0..k {
                    let p = (row[i] - mx).exp() / z;
                    if t(i) > 0.0 {
                        value -= p.ln() / nb;
                    }
                    grad[n * k + i] = (p - t(i)) / nb;
                }
            }
        }
    }
    (value, grad)
}

#[derive(Debug, Clone)]
pub enum Params {
    None,
    Conv(Vec<f64>),
    Fc { w: Vec<f64>, b: Option<Vec<f64>> },
    Bn { gamma: Vec<f64>, beta: Vec<f64>, rmean: Vec<f64>, rvar: Vec<f64>, momentum: f64 },
}

/// The whole network in real arithmetic.
#[derive(Debug, Clone)]
pub struct Shadow {
    pub net: Network,
    pub params: Vec<Params>,
    pub lr: f64,
}

impl Shadow {
    /// Starts from the dequantized values of a fixed-point state.
    pub fn from_state(net: &Network, state: &TrainState, lr: f64) -> Self {
        let params = state
            .params
            .iter()
            .map(|p| match p {
                LayerParams::None => Params::None,
                LayerParams::Conv { weights } => Params::Conv(weights.to_f64()),
                LayerParams::Fc { weights, bias } => {
                    Params::Fc { w: weights.to_f64(), b: bias.as_ref().map(|b| b.to_f64()) }
                }
                LayerParams::BatchNorm(b) => Params::Bn {
                    gamma: b.gamma.to_f64(),
                    beta: b.beta.to_f64(),
                    rmean: b.running_mean.clone(),
                    rvar: b.running_var.clone(),
                    momentum: b.momentum,
                },
            })
            .collect();
        Shadow { net: net.clone(), params, lr }
    }

    /// Activations: input of each layer followed by the network output.
    pub fn forward(&self, x: &[f64], batch: usize, train: bool) -> Vec<Vec<f64>> {
        let shapes = self.net.shapes(batch).expect("valid network");
        let mut acts = vec![x.to_vec()];
        for (ls, p) in shapes.iter().zip(&self.params) {
            let x = acts.last().unwrap();
            let dims = dims_of(ls.input);
            let y = match (&ls.op, p) {
                (LayerOp::Conv(s), Params::Conv(w)) => conv(x, w, s),
                (LayerOp::Fc(s), Params::Fc { w, b }) => fc(x, w, b.as_deref(), s, batch),
                (LayerOp::Relu, _) => x.iter().map(|v| v.max(0.0)).collect(),
                (LayerOp::Pool(s), _) => pool(x, dims, s),
                (LayerOp::BatchNorm { .. }, Params::Bn { gamma, beta, rmean, rvar, .. }) => {
                    if train {
                        bn_train(x, dims, gamma, beta)
                    } else {
                        let hw = dims[2] * dims[3];
                        x.iter()
                            .enumerate()
                            .map(|(i, &v)| {
                                let c = (i / hw) % dims[1];
                                gamma[c] * (v - rmean[c]) / (rvar[c] + BN_EPS).sqrt() + beta[c]
                            })
                            .collect()
                    }
                }
                (LayerOp::Scalar { op, value }, _) => x
                    .iter()
                    .map(|v| match op {
                        ScalarOp::Add => v + value,
                        ScalarOp::Sub => v - value,
                    })
                    .collect(),
                (LayerOp::Reshape(_), _) | (LayerOp::Loss(_), _) => x.clone(),
                (op, _) => panic!("parameters do not match {op:?}"),
            };
            acts.push(y);
        }
        acts
    }

    pub fn predict(&self, x: &[f64], batch: usize) -> Vec<usize> {
        let out = self.forward(x, batch, false).pop().unwrap();
        let k = out.len() / batch;
        out.chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// One SGD step; returns the loss before the update.
    pub fn train_step(&mut self, x: &[f64], labels: &[usize]) -> f64 {
        let batch = labels.len();
        let shapes = self.net.shapes(batch).expect("valid network");
        let kind = self.net.loss_kind().expect("loss layer");
        let acts = self.forward(x, batch, true);
        let li = shapes.len() - 1;
        let k = acts[li].len() / batch;
        let (value, mut g) = loss_and_grad(&acts[li], k, labels, kind);
        let mut updates: Vec<Option<Vec<Vec<f64>>>> = vec![None; shapes.len()];
        for i in (0..li).rev() {
            let x = &acts[i];
            let dims = dims_of(shapes[i].input);
            g = match (&shapes[i].op, &self.params[i]) {
                (LayerOp::Conv(s), Params::Conv(w)) => {
                    let (gx, gw) = conv_back(&g, x, w, s);
                    updates[i] = Some(vec![gw]);
                    gx
                }
                (LayerOp::Fc(s), Params::Fc { w, .. }) => {
                    let (gx, gw, gb) = fc_back(&g, x, w, s, batch);
                    updates[i] = Some(vec![gw, gb]);
                    gx
                }
                (LayerOp::Relu, _) => g.iter().zip(x).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
                (LayerOp::Pool(s), _) => pool_back(&g, x, dims, s),
                (LayerOp::BatchNorm { .. }, Params::Bn { gamma, .. }) => {
                    let (gx, gg, gb) = bn_back(&g, x, dims, gamma);
                    updates[i] = Some(vec![gg, gb]);
                    gx
                }
                _ => g,
            };
        }
        let lr = self.lr;
        let step = |p: &mut Vec<f64>, g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        for (i, u) in updates.into_iter().enumerate() {
            let Some(u) = u else { continue };
            match &mut self.params[i] {
                Params::Conv(w) => step(w, &u[0]),
                Params::Fc { w, b } => {
                    step(w, &u[0]);
                    if let Some(b) = b {
                        step(b, &u[1]);
                    }
                }
                Params::Bn { gamma, beta, rmean, rvar, momentum } => {
                    step(gamma, &u[0]);
                    step(beta, &u[1]);
                    let (m, v) = bn_stats(&acts[i], dims_of(shapes[i].input));
                    for c in 0..m.len() {
                        rmean[c] = *momentum * rmean[c] + (1.0 - *momentum) * m[c];
                        rvar[c] = *momentum * rvar[c] + (1.0 - *momentum) * v[c];
                    }
                }
                Params::None => {}
            }
        }
        value
    }
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn bn_back(gy: &[f64], x: &[f64], dims: [usize; 4], gamma: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let m = (n * h * w) as f64;
    let (mean, var) = bn_stats(x, dims);
    let sigma: Vec<f64> = var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
    let ch = |i: usize| (i / (h * w)) % c;
    let xhat: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v - mean[ch(i)]) / sigma[ch(i)]).collect();
    let mut gb = vec![0.0; c];
    let mut gg = vec![0.0; c];
    for i in 0..x.len() {
        gb[ch(i)] += gy[i];
        gg[ch(i)] += gy[i] * xhat[i];
    }
    let gx = (0..x.len())
        .map(|i| gamma[ch(i)] / (m * sigma[ch(i)]) * (m * gy[i] - gb[ch(i)] - xhat[i] * gg[ch(i)]))
        .collect();
    (gx, gg, gb)
}

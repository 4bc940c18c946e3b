use serde::{Deserialize, Serialize};

use super::{dense_raw, expect_shape, NnError, OpStats, RoundCtx, Stream};
use crate::fixedpoint::QFormat;
use crate::sparse::{MaskedTensor, Shape};

/// Variance floor added before the square root.
pub const BN_EPSILON: f64 = 1.0 / 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Per-channel scale/shift plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    /// `[1, C, 1, 1]`
    pub gamma: MaskedTensor,
    /// `[1, C, 1, 1]`
    pub beta: MaskedTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn identity(channels: usize, fmt: QFormat, momentum: f64) -> Result<Self, NnError> {
        let shape = Self::param_shape(channels);
        let one = crate::fixedpoint::quantize_nearest(1.0, fmt)?;
        Ok(BatchNormParams {
            gamma: MaskedTensor::from_dense(shape, fmt, &vec![one; channels])?,
            beta: MaskedTensor::zeros(shape, fmt),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        })
    }

    pub fn param_shape(channels: usize) -> Shape {
        Shape::new(1, channels, 1, 1)
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * batch.mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * batch.var[c];
        }
    }
}

/// Per-channel batch mean and (biased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub grad_input: MaskedTensor,
    pub grad_gamma: MaskedTensor,
    pub grad_beta: MaskedTensor,
}

fn channel_values(x: &MaskedTensor) -> Vec<Vec<i64>> {
    let s = x.shape();
    let raw = dense_raw(x);
    let hw = s.h() * s.w();
    let mut out = vec![Vec::with_capacity(s.n() * hw); s.c()];
    for n in 0..s.n() {
        for (c, vals) in out.iter_mut().enumerate() {
            let b = s.index(n, c, 0, 0);
            vals.extend_from_slice(&raw[b..b + hw]);
        }
    }
    out
}

/// Exact integer sums, converted once: `var = (M*sum(x^2) - sum(x)^2) / M^2`.
pub fn batch_stats(x: &MaskedTensor) -> BatchStats {
    let eps = x.format().epsilon();
    let (mut mean, mut var) = (vec![], vec![]);
    for vals in channel_values(x) {
        let m = vals.len() as i128;
        let sum: i128 = vals.iter().map(|&v| v as i128).sum();
        let sq: i128 = vals.iter().map(|&v| (v as i128) * (v as i128)).sum();
        mean.push(sum as f64 / m as f64 * eps);
        var.push((m * sq - sum * sum) as f64 / (m * m) as f64 * eps * eps);
    }
    BatchStats { mean, var }
}

/// Returns the normalized output and, in train mode, the batch statistics
/// (for the caller to fold into the running averages).
pub fn batchnorm_forward(
    x: &MaskedTensor,
    params: &BatchNormParams,
    mode: BnMode,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<(MaskedTensor, Option<BatchStats>), NnError> {
    let s = x.shape();
    let c = s.c();
    expect_shape(&params.gamma, BatchNormParams::param_shape(c), "batch_norm gamma")?;
    expect_shape(&params.beta, BatchNormParams::param_shape(c), "batch_norm beta")?;
    if params.channels() != c {
        return Err(NnError::Mismatch(format!("batch_norm has {} channels, input has {c}", params.channels())));
    }
    let batch = match mode {
        BnMode::Train => Some(batch_stats(x)),
        BnMode::Infer => None,
    };
    let (mean, var) = match &batch {
        Some(b) => (b.mean.clone(), b.var.clone()),
        None => (params.running_mean.clone(), params.running_var.clone()),
    };
    let gamma = params.gamma.to_f64();
    let beta = params.beta.to_f64();
    let xs = x.to_f64();
    let hw = s.h() * s.w();
    let y: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + BN_EPSILON).sqrt() + beta[ch]
        })
        .collect();
    let out = ctx.quantize_tensor(&y, s, Stream::Forward, &mut stats.saturation)?;
    Ok((out, batch))
}

/// Train-mode batch-norm gradient:
/// `dx = gamma / (M * sigma) * (M * dy - sum(dy) - xhat * sum(dy * xhat))`.
pub fn batchnorm_backward(
    grad_out: &MaskedTensor,
    x: &MaskedTensor,
    params: &BatchNormParams,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<BnGrads, NnError> {
    let s = x.shape();
    expect_shape(grad_out, s, "batch_norm grad_out")?;
    let c = s.c();
    let hw = s.h() * s.w();
    let m = (s.n() * hw) as f64;
    let BatchStats { mean, var } = batch_stats(x);
    let gamma = params.gamma.to_f64();
    let xs = x.to_f64();
    let dy = grad_out.to_f64();
    let sigma: Vec<f64> = var.iter().map(|v| (v + BN_EPSILON).sqrt()).collect();
    let xhat: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            (v - mean[ch]) / sigma[ch]
        })
        .collect();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for i in 0..xs.len() {
        let ch = (i / hw) % c;
        sum_dy[ch] += dy[i];
        sum_dy_xhat[ch] += dy[i] * xhat[i];
    }
    let dx: Vec<f64> = (0..xs.len())
        .map(|i| {
            let ch = (i / hw) % c;
            gamma[ch] / (m * sigma[ch]) * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
        })
        .collect();
    let pshape = BatchNormParams::param_shape(c);
    Ok(BnGrads {
        grad_input: ctx.quantize_tensor(&dx, s, Stream::GradInput, &mut stats.saturation)?,
        grad_gamma: ctx.quantize_tensor(&sum_dy_xhat, pshape, Stream::GradWeight, &mut stats.saturation)?,
        grad_beta: ctx.quantize_tensor(&sum_dy, pshape, Stream::GradBias, &mut stats.saturation)?,
    })
}

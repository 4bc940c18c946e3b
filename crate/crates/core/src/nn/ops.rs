use serde::{Deserialize, Serialize};

use super::conv::output_extent;
use super::{dense_raw, expect_shape, from_raw_tensor, NnError, OpStats, PoolKind, RoundCtx, ScalarOp, Stream};
use crate::fixedpoint::{quantize_nearest, Fixed, Lfsr, Rounding};
use crate::sparse::{MaskedTensor, Shape};

/// Square pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        if self.window == 0 || self.stride == 0 {
            return Err(NnError::shape(0, "window", "window and stride must be positive"));
        }
        let p = output_extent(input.h(), 0, self.window, self.stride);
        let q = output_extent(input.w(), 0, self.window, self.stride);
        match (p, q) {
            (Some(p), Some(q)) => Ok(Shape::new(input.n(), input.c(), p, q)),
            _ => Err(NnError::shape(
                0,
                "window",
                format!("window {} / stride {} does not tile {}x{}", self.window, self.stride, input.h(), input.w()),
            )),
        }
    }
}

/// Zero padding on the two spatial dimensions.
pub fn pad(x: &MaskedTensor, pad_h: usize, pad_w: usize) -> Result<MaskedTensor, NnError> {
    let s = x.shape();
    let out = Shape::new(s.n(), s.c(), s.h() + 2 * pad_h, s.w() + 2 * pad_w);
    let src = x.to_dense();
    let mut dst = vec![Fixed::zero(x.format()); out.len()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            for h in 0..s.h() {
                let a = s.index(n, c, h, 0);
                let b = out.index(n, c, h + pad_h, pad_w);
                dst[b..b + s.w()].copy_from_slice(&src[a..a + s.w()]);
            }
        }
    }
    Ok(MaskedTensor::from_dense(out, x.format(), &dst)?)
}

/// `max(0, x)`; negative entries leave the mask.
pub fn relu(x: &MaskedTensor) -> Result<MaskedTensor, NnError> {
    let d: Vec<Fixed> = x
        .to_dense()
        .into_iter()
        .map(|v| if v.raw() > 0 { v } else { Fixed::zero(x.format()) })
        .collect();
    Ok(MaskedTensor::from_dense(x.shape(), x.format(), &d)?)
}

pub fn relu_backward(grad: &MaskedTensor, x: &MaskedTensor) -> Result<MaskedTensor, NnError> {
    expect_shape(grad, x.shape(), "relu grad")?;
    let xs = x.to_dense();
    let d: Vec<Fixed> = grad
        .to_dense()
        .into_iter()
        .zip(xs)
        .map(|(g, v)| if v.raw() > 0 { g } else { Fixed::zero(x.format()) })
        .collect();
    Ok(MaskedTensor::from_dense(x.shape(), x.format(), &d)?)
}

/// Rounds `num / den` (`den > 0`) to an integer.
fn round_quotient(num: i128, den: i128, mode: Rounding, rng: &mut Lfsr) -> i128 {
    let q = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    let up = match mode {
        Rounding::Nearest => 2 * rem >= den,
        Rounding::Stochastic => (rng.draw(32) as i128) * den < rem << 32,
    };
    q + up as i128
}

fn windows(input: Shape, out: Shape, spec: &PoolSpec) -> impl Iterator<Item = (usize, Vec<usize>)> {
    let spec = *spec;
    (0..out.len()).map(move |o| {
        let q = o % out.w();
        let p = (o / out.w()) % out.h();
        let c = (o / (out.w() * out.h())) % out.c();
        let n = o / (out.w() * out.h() * out.c());
        let mut idx = Vec::with_capacity(spec.window * spec.window);
        for r in 0..spec.window {
            for s in 0..spec.window {
                idx.push(input.index(n, c, p * spec.stride + r, q * spec.stride + s));
            }
        }
        (o, idx)
    })
}

/// First position in row-major window order holding the extreme value.
fn arg_extreme(kind: PoolKind, x: &[i64], idx: &[usize]) -> usize {
    let mut best = idx[0];
    for &i in &idx[1..] {
        let better = match kind {
            PoolKind::Max => x[i] > x[best],
            PoolKind::Min => x[i] < x[best],
            PoolKind::Mean => false,
        };
        if better {
            best = i;
        }
    }
    best
}

pub fn pool(x: &MaskedTensor, spec: &PoolSpec, ctx: &RoundCtx, _stats: &mut OpStats) -> Result<MaskedTensor, NnError> {
    let out_shape = spec.output_shape(x.shape())?;
    let raw = dense_raw(x);
    let k = (spec.window * spec.window) as i128;
    let mut out = vec![0i64; out_shape.len()];
    for (o, idx) in windows(x.shape(), out_shape, spec) {
        out[o] = match spec.kind {
            PoolKind::Max | PoolKind::Min => raw[arg_extreme(spec.kind, &raw, &idx)],
            PoolKind::Mean => {
                let sum: i128 = idx.iter().map(|&i| raw[i] as i128).sum();
                let mut rng = ctx.rng(Stream::Forward, o);
                round_quotient(sum, k, ctx.mode, &mut rng) as i64
            }
        };
    }
    from_raw_tensor(out_shape, ctx.fmt, &out)
}

/// Max/min send the gradient to the first extreme position of each window;
/// mean gives every position the rounded quotient `grad / window_area`.
pub fn pool_backward(
    grad_out: &MaskedTensor,
    x: &MaskedTensor,
    spec: &PoolSpec,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<MaskedTensor, NnError> {
    let out_shape = spec.output_shape(x.shape())?;
    expect_shape(grad_out, out_shape, "pool grad_out")?;
    let raw = dense_raw(x);
    let g = dense_raw(grad_out);
    let k = (spec.window * spec.window) as i128;
    let mut gi = vec![0i128; raw.len()];
    for (o, idx) in windows(x.shape(), out_shape, spec) {
        if g[o] == 0 {
            continue;
        }
        match spec.kind {
            PoolKind::Max | PoolKind::Min => gi[arg_extreme(spec.kind, &raw, &idx)] += g[o] as i128,
            PoolKind::Mean => {
                let mut rng = ctx.rng(Stream::GradInput, o);
                let share = round_quotient(g[o] as i128, k, ctx.mode, &mut rng);
                for &i in &idx {
                    gi[i] += share;
                }
            }
        }
    }
    let fmt = ctx.fmt;
    let out: Vec<i64> = gi
        .into_iter()
        .map(|v| {
            let (f, clamped) = Fixed::saturating_from_raw(v, fmt);
            stats.saturation.narrow += clamped as u64;
            f.raw()
        })
        .collect();
    from_raw_tensor(x.shape(), fmt, &out)
}

/// Keeps the batch dimension and reinterprets the rest as `[c, h, w]`.
pub fn reshape(x: &MaskedTensor, chw: [usize; 3]) -> Result<MaskedTensor, NnError> {
    let s = x.shape();
    let target = Shape::new(s.n(), chw[0], chw[1], chw[2]);
    if target.len() != s.len() {
        return Err(NnError::Mismatch(format!("cannot reshape {s} to {target}")));
    }
    Ok(x.reshape(target)?)
}

/// Adds or subtracts a constant (quantized to nearest) with saturation.
pub fn scalar(x: &MaskedTensor, op: ScalarOp, value: f64, stats: &mut OpStats) -> Result<MaskedTensor, NnError> {
    let fmt = x.format();
    let c = quantize_nearest(value, fmt)?.raw() as i128;
    let c = match op {
        ScalarOp::Add => c,
        ScalarOp::Sub => -c,
    };
    let d: Vec<Fixed> = x
        .to_dense()
        .into_iter()
        .map(|v| {
            let (f, clamped) = Fixed::saturating_from_raw(v.raw() as i128 + c, fmt);
            stats.saturation.narrow += clamped as u64;
            f
        })
        .collect();
    Ok(MaskedTensor::from_dense(x.shape(), fmt, &d)?)
}

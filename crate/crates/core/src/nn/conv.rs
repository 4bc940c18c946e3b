use serde::{Deserialize, Serialize};

use super::{compress_raw, dense_raw, expect_shape, from_raw_tensor, NnError, OpStats, RoundCtx, Stream};
use crate::fixedpoint::WideAcc;
use crate::sparse::{MaskedTensor, MaskedVector, Shape};

/// Convolution geometry: `N` images of `C x H x W`, `K` filters of
/// `C x R x S`, strides `u` (vertical) and `v` (horizontal), zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub s: usize,
    pub u: usize,
    pub v: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Validates that `P` and `Q` are at least 1. Trailing input rows or
    /// columns that a stride cannot reach are dropped (floor division).
    pub fn validate(&self) -> Result<(), NnError> {
        let dims = [
            ("n", self.n),
            ("k", self.k),
            ("c", self.c),
            ("h", self.h),
            ("w", self.w),
            ("r", self.r),
            ("s", self.s),
            ("stride", self.u),
            ("stride", self.v),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(NnError::shape(0, name, "must be positive"));
            }
        }
        conv_extent(self.h, self.pad_h, self.r, self.u).ok_or_else(|| {
            NnError::shape(0, "kernel", format!(
                "kernel height {} exceeds padded input height {}",
                self.r,
                self.h + 2 * self.pad_h
            ))
        })?;
        conv_extent(self.w, self.pad_w, self.s, self.v).ok_or_else(|| {
            NnError::shape(0, "kernel", format!(
                "kernel width {} exceeds padded input width {}",
                self.s,
                self.w + 2 * self.pad_w
            ))
        })?;
        Ok(())
    }

    pub fn p(&self) -> usize {
        conv_extent(self.h, self.pad_h, self.r, self.u).expect("validated spec")
    }

    pub fn q(&self) -> usize {
        conv_extent(self.w, self.pad_w, self.s, self.v).expect("validated spec")
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.n, self.c, self.h, self.w)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.k, self.c, self.r, self.s)
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.n, self.k, self.p(), self.q())
    }

    /// `N * K * C * R * S * P * Q`.
    pub fn macs(&self) -> u64 {
        (self.n * self.k * self.c * self.r * self.s * self.p() * self.q()) as u64
    }
}

/// `floor((size + 2*pad - kernel) / stride) + 1`, or `None` if the kernel
/// does not fit.
pub(crate) fn conv_extent(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Like [`conv_extent`] but requires the windows to tile the extent exactly.
pub(crate) fn output_extent(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Zero-padded dense copy of `x` (`[N, C, H + 2ph, W + 2pw]`).
fn padded_raw(x: &[i64], spec: &ConvSpec) -> (Vec<i64>, usize, usize) {
    let hp = spec.h + 2 * spec.pad_h;
    let wp = spec.w + 2 * spec.pad_w;
    let mut out = vec![0i64; spec.n * spec.c * hp * wp];
    for n in 0..spec.n {
        for c in 0..spec.c {
            for h in 0..spec.h {
                let src = ((n * spec.c + c) * spec.h + h) * spec.w;
                let dst = ((n * spec.c + c) * hp + h + spec.pad_h) * wp + spec.pad_w;
                out[dst..dst + spec.w].copy_from_slice(&x[src..src + spec.w]);
            }
        }
    }
    (out, hp, wp)
}

/// Direct convolution over compressed operands.
///
/// For every output position the `C x R x S` input window is gathered from
/// the padded input and compressed once, then aligned against each of the
/// `K` compressed filters.
pub fn conv_forward(
    input: &MaskedTensor,
    weights: &MaskedTensor,
    spec: &ConvSpec,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<MaskedTensor, NnError> {
    spec.validate()?;
    expect_shape(input, spec.input_shape(), "conv input")?;
    expect_shape(weights, spec.weight_shape(), "conv weights")?;
    let fmt = ctx.fmt;
    let (x, hp, wp) = padded_raw(&dense_raw(input), spec);
    let crs = spec.c * spec.r * spec.s;
    let wraw = dense_raw(weights);
    let filters: Vec<MaskedVector> =
        wraw.chunks(crs).map(|f| compress_raw(f, fmt)).collect();
    let (p_out, q_out) = (spec.p(), spec.q());
    let out_shape = spec.output_shape();
    let mut out = vec![0i64; out_shape.len()];
    let mut window = vec![0i64; crs];
    for n in 0..spec.n {
        for p in 0..p_out {
            for q in 0..q_out {
                let mut i = 0;
                for c in 0..spec.c {
                    for r in 0..spec.r {
                        let row = ((n * spec.c + c) * hp + p * spec.u + r) * wp + q * spec.v;
                        window[i..i + spec.s].copy_from_slice(&x[row..row + spec.s]);
                        i += spec.s;
                    }
                }
                let win = compress_raw(&window, fmt);
                for (k, filter) in filters.iter().enumerate() {
                    let (acc, cnt) = win.dot_wide(filter, WideAcc::zero(fmt), &mut stats.saturation)?;
                    stats.aligned_macs += cnt as u64;
                    let idx = out_shape.index(n, k, p, q);
                    let mut rng = ctx.rng(Stream::Forward, idx);
                    out[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
                }
            }
        }
    }
    stats.dense_macs += spec.macs();
    from_raw_tensor(out_shape, fmt, &out)
}

/// Gradients of a convolution.
///
/// `grad_weights[k][c][r][s] = sum over n, p, q of grad_out * padded input`,
/// accumulated across the whole batch before a single rounding.
/// `grad_input` is the correlation of `grad_out` with the flipped filters,
/// evaluated only at un-padded input positions. Pass `need_input = false`
/// to skip it (returns zeros), e.g. for the first layer of a network.
pub fn conv_backward(
    grad_out: &MaskedTensor,
    input: &MaskedTensor,
    weights: &MaskedTensor,
    spec: &ConvSpec,
    need_input: bool,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<(MaskedTensor, MaskedTensor), NnError> {
    spec.validate()?;
    expect_shape(grad_out, spec.output_shape(), "conv grad_out")?;
    expect_shape(input, spec.input_shape(), "conv input")?;
    expect_shape(weights, spec.weight_shape(), "conv weights")?;
    let fmt = ctx.fmt;
    let (p_out, q_out) = (spec.p(), spec.q());
    let go = dense_raw(grad_out);
    let (x, hp, wp) = padded_raw(&dense_raw(input), spec);
    let w = dense_raw(weights);
    let npq = spec.n * p_out * q_out;

    // grad_weights: vectors over (n, p, q).
    let go_rows: Vec<MaskedVector> = (0..spec.k)
        .map(|k| {
            let mut v = Vec::with_capacity(npq);
            for n in 0..spec.n {
                let base = (n * spec.k + k) * p_out * q_out;
                v.extend_from_slice(&go[base..base + p_out * q_out]);
            }
            compress_raw(&v, fmt)
        })
        .collect();
    let wshape = spec.weight_shape();
    let mut gw = vec![0i64; wshape.len()];
    let mut col = vec![0i64; npq];
    for c in 0..spec.c {
        for r in 0..spec.r {
            for s in 0..spec.s {
                let mut i = 0;
                for n in 0..spec.n {
                    for p in 0..p_out {
                        for q in 0..q_out {
                            col[i] = x[((n * spec.c + c) * hp + p * spec.u + r) * wp + q * spec.v + s];
                            i += 1;
                        }
                    }
                }
                let xv = compress_raw(&col, fmt);
                for (k, gov) in go_rows.iter().enumerate() {
                    let (acc, cnt) = gov.dot_wide(&xv, WideAcc::zero(fmt), &mut stats.saturation)?;
                    stats.aligned_macs += cnt as u64;
                    let idx = wshape.index(k, c, r, s);
                    let mut rng = ctx.rng(Stream::GradWeight, idx);
                    gw[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
                }
            }
        }
    }
    stats.dense_macs += spec.macs();
    let grad_w = from_raw_tensor(wshape, fmt, &gw)?;

    let ishape = spec.input_shape();
    if !need_input {
        return Ok((MaskedTensor::zeros(ishape, fmt), grad_w));
    }

    // grad_input: vectors over (k, r, s); one compressed filter column per c.
    let krs = spec.k * spec.r * spec.s;
    let wcols: Vec<MaskedVector> = (0..spec.c)
        .map(|c| {
            let mut v = Vec::with_capacity(krs);
            for k in 0..spec.k {
                for r in 0..spec.r {
                    for s in 0..spec.s {
                        v.push(w[wshape.index(k, c, r, s)]);
                    }
                }
            }
            compress_raw(&v, fmt)
        })
        .collect();
    let mut gi = vec![0i64; ishape.len()];
    let mut gather = vec![0i64; krs];
    for n in 0..spec.n {
        for h in 0..spec.h {
            for wi in 0..spec.w {
                let (hh, ww) = (h + spec.pad_h, wi + spec.pad_w);
                let mut valid = 0u64;
                let mut i = 0;
                for k in 0..spec.k {
                    for r in 0..spec.r {
                        for s in 0..spec.s {
                            gather[i] = 0;
                            if hh >= r && ww >= s && (hh - r) % spec.u == 0 && (ww - s) % spec.v == 0 {
                                let (p, q) = ((hh - r) / spec.u, (ww - s) / spec.v);
                                if p < p_out && q < q_out {
                                    gather[i] = go[((n * spec.k + k) * p_out + p) * q_out + q];
                                    valid += 1;
                                }
                            }
                            i += 1;
                        }
                    }
                }
                let gv = compress_raw(&gather, fmt);
                for (c, wc) in wcols.iter().enumerate() {
                    let (acc, cnt) = gv.dot_wide(wc, WideAcc::zero(fmt), &mut stats.saturation)?;
                    stats.aligned_macs += cnt as u64;
                    stats.dense_macs += valid;
                    let idx = ishape.index(n, c, h, wi);
                    let mut rng = ctx.rng(Stream::GradInput, idx);
                    gi[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
                }
            }
        }
    }
    Ok((from_raw_tensor(ishape, fmt, &gi)?, grad_w))
}

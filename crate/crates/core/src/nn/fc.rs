use serde::{Deserialize, Serialize};

use super::{compress_raw, dense_raw, expect_shape, from_raw_tensor, NnError, OpStats, RoundCtx, Stream};
use crate::fixedpoint::{Fixed, WideAcc};
use crate::sparse::{MaskedTensor, MaskedVector, Shape};

/// Fully connected layer: `m` outputs from `n` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FcSpec {
    pub m: usize,
    pub n: usize,
    pub bias: bool,
}

impl FcSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.m == 0 {
            return Err(NnError::shape(0, "outputs", "must be positive"));
        }
        if self.n == 0 {
            return Err(NnError::shape(0, "inputs", "must be positive"));
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 1, 1, self.n)
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 1, 1, self.m)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(1, 1, self.m, self.n)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, 1, 1, self.m)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (batch * self.m * self.n) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub grad_input: MaskedTensor,
    pub grad_weights: MaskedTensor,
    pub grad_bias: MaskedTensor,
}

fn rows(raw: &[i64], len: usize, fmt: crate::fixedpoint::QFormat) -> Vec<MaskedVector> {
    raw.chunks(len).map(|r| compress_raw(r, fmt)).collect()
}

/// `y = W x + b` per sample. `input` is `[N, 1, 1, n]`; the bias is loaded
/// into the wide accumulator before the products are added.
pub fn fc_forward(
    input: &MaskedTensor,
    weights: &MaskedTensor,
    bias: Option<&MaskedTensor>,
    spec: &FcSpec,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<MaskedTensor, NnError> {
    spec.validate()?;
    let batch = input.shape().n();
    expect_shape(input, spec.input_shape(batch), "fc input")?;
    expect_shape(weights, spec.weight_shape(), "fc weights")?;
    let fmt = ctx.fmt;
    let b: Vec<Fixed> = match (bias, spec.bias) {
        (Some(b), true) => {
            expect_shape(b, spec.bias_shape(), "fc bias")?;
            b.to_dense()
        }
        (None, false) => vec![Fixed::zero(fmt); spec.m],
        (Some(_), false) => return Err(NnError::Mismatch("fc bias given but spec has none".into())),
        (None, true) => return Err(NnError::Mismatch("fc spec expects a bias".into())),
    };
    let w = rows(&dense_raw(weights), spec.n, fmt);
    let x = rows(&dense_raw(input), spec.n, fmt);
    let out_shape = spec.output_shape(batch);
    let mut out = vec![0i64; out_shape.len()];
    for (s, xv) in x.iter().enumerate() {
        for (i, wv) in w.iter().enumerate() {
            let (acc, cnt) = xv.dot_wide(wv, b[i].widen(), &mut stats.saturation)?;
            stats.aligned_macs += cnt as u64;
            let idx = s * spec.m + i;
            let mut rng = ctx.rng(Stream::Forward, idx);
            out[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
        }
    }
    stats.dense_macs += spec.macs(batch);
    from_raw_tensor(out_shape, fmt, &out)
}

/// Transpose products for a fully connected layer. The weight and bias
/// gradients sum over the batch in the wide accumulator before rounding.
/// With `need_input = false` the input gradient is returned as zeros.
pub fn fc_backward(
    grad_out: &MaskedTensor,
    input: &MaskedTensor,
    weights: &MaskedTensor,
    spec: &FcSpec,
    need_input: bool,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<FcGrads, NnError> {
    spec.validate()?;
    let batch = input.shape().n();
    expect_shape(input, spec.input_shape(batch), "fc input")?;
    expect_shape(grad_out, spec.output_shape(batch), "fc grad_out")?;
    expect_shape(weights, spec.weight_shape(), "fc weights")?;
    let fmt = ctx.fmt;
    let (m, n) = (spec.m, spec.n);
    let gy = dense_raw(grad_out);
    let x = dense_raw(input);
    let w = dense_raw(weights);

    let transpose = |raw: &[i64], r: usize, c: usize| -> Vec<MaskedVector> {
        (0..c)
            .map(|j| compress_raw(&(0..r).map(|i| raw[i * c + j]).collect::<Vec<_>>(), fmt))
            .collect()
    };
    // Columns over the batch.
    let gy_cols = transpose(&gy, batch, m);
    let x_cols = transpose(&x, batch, n);

    let mut gw = vec![0i64; m * n];
    for (i, g) in gy_cols.iter().enumerate() {
        for (j, xv) in x_cols.iter().enumerate() {
            let (acc, cnt) = g.dot_wide(xv, WideAcc::zero(fmt), &mut stats.saturation)?;
            stats.aligned_macs += cnt as u64;
            let idx = i * n + j;
            let mut rng = ctx.rng(Stream::GradWeight, idx);
            gw[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
        }
    }
    stats.dense_macs += spec.macs(batch);

    let mut gb = vec![0i64; m];
    for (i, g) in gy_cols.iter().enumerate() {
        let mut acc = WideAcc::zero(fmt);
        for &v in g.payload() {
            acc = acc.accumulate(v.widen(), &mut stats.saturation);
        }
        let mut rng = ctx.rng(Stream::GradBias, i);
        gb[i] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
    }

    let in_shape = spec.input_shape(batch);
    let grad_input = if need_input {
        let gy_rows = rows(&gy, m, fmt);
        let w_cols = transpose(&w, m, n);
        let mut gx = vec![0i64; batch * n];
        for (s, g) in gy_rows.iter().enumerate() {
            for (j, wc) in w_cols.iter().enumerate() {
                let (acc, cnt) = g.dot_wide(wc, WideAcc::zero(fmt), &mut stats.saturation)?;
                stats.aligned_macs += cnt as u64;
                let idx = s * n + j;
                let mut rng = ctx.rng(Stream::GradInput, idx);
                gx[idx] = acc.round(ctx.mode, &mut rng, &mut stats.saturation).raw();
            }
        }
        stats.dense_macs += spec.macs(batch);
        from_raw_tensor(in_shape, fmt, &gx)?
    } else {
        MaskedTensor::zeros(in_shape, fmt)
    };

    Ok(FcGrads {
        grad_input,
        grad_weights: from_raw_tensor(spec.weight_shape(), fmt, &gw)?,
        grad_bias: from_raw_tensor(spec.bias_shape(), fmt, &gb)?,
    })
}

use serde::{Deserialize, Serialize};

use super::{expect_shape, NnError, OpStats, RoundCtx, Stream};
use crate::sparse::MaskedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
    #[serde(rename = "softmax_xent", alias = "softmax-xent")]
    SoftmaxXent,
}

/// Either one class index per sample (one-hot for L1/L2) or explicit targets
/// with the prediction's shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    Values(MaskedTensor),
}

fn target_rows(pred: &MaskedTensor, target: &Target) -> Result<Vec<f64>, NnError> {
    let batch = pred.shape().n();
    let k = pred.shape().len() / batch.max(1);
    match target {
        Target::Classes(cls) => {
            if cls.len() != batch {
                return Err(NnError::Mismatch(format!("{} labels for a batch of {batch}", cls.len())));
            }
            let mut t = vec![0.0; batch * k];
            for (n, &c) in cls.iter().enumerate() {
                if c >= k {
                    return Err(NnError::InvalidTarget { class: c, classes: k });
                }
                t[n * k + c] = 1.0;
            }
            Ok(t)
        }
        Target::Values(v) => {
            expect_shape(v, pred.shape(), "loss target")?;
            Ok(v.to_f64())
        }
    }
}

/// Softmax of each row of `logits`.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Batch-mean loss and its gradient with respect to `pred`.
///
/// * `l2`: `sum((p - t)^2) / (2N)`
/// * `l1`: `sum(|p - t|) / N` (subgradient 0 at equality)
/// * `softmax_xent`: `-sum(t * log softmax(p)) / N`
///
/// Computed in `f64`; the gradient is quantized on the way out.
pub fn loss(
    pred: &MaskedTensor,
    target: &Target,
    kind: LossKind,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<(f64, MaskedTensor), NnError> {
    let shape = pred.shape();
    let batch = shape.n();
    let k = shape.len() / batch.max(1);
    let t = target_rows(pred, target)?;
    let p = pred.to_f64();
    let nb = batch as f64;
    let (value, grad): (f64, Vec<f64>) = match kind {
        LossKind::L2 => {
            let v = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * nb);
            (v, p.iter().zip(&t).map(|(a, b)| (a - b) / nb).collect())
        }
        LossKind::L1 => {
            let v = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / nb;
            let g = p
                .iter()
                .zip(&t)
                .map(|(a, b)| match a.partial_cmp(b) {
                    Some(std::cmp::Ordering::Greater) => 1.0 / nb,
                    Some(std::cmp::Ordering::Less) => -1.0 / nb,
                    _ => 0.0,
                })
                .collect();
            (v, g)
        }
        LossKind::SoftmaxXent => {
            let sm = softmax_rows(&p, k);
            let v = -sm
                .iter()
                .zip(&t)
                .filter(|(_, &b)| b != 0.0)
                .map(|(s, b)| b * s.ln())
                .sum::<f64>()
                / nb;
            (v, sm.iter().zip(&t).map(|(s, b)| (s - b) / nb).collect())
        }
    };
    let grad = ctx.quantize_tensor(&grad, shape, Stream::Loss, &mut stats.saturation)?;
    Ok((value, grad))
}

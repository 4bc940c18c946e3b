use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::BatchStats;
use super::graph::LayerOp;
use super::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, fc_backward, fc_forward, loss,
    pool, pool_backward, relu, relu_backward, scalar, BatchNormParams, BnMode, NnError, Network, OpStats,
    RoundCtx, Stream, Target,
};
use crate::fixedpoint::{quantize_nearest, Fixed, QFormat, Rounding};
use crate::sparse::{MaskedTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    #[serde(alias = "infer")]
    Inference,
    #[serde(alias = "train")]
    Training,
}

/// Trainable state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Conv { weights: MaskedTensor },
    Fc { weights: MaskedTensor, bias: Option<MaskedTensor> },
    BatchNorm(BatchNormParams),
}

impl LayerParams {
    /// Named tensors, in a fixed order, for checkpointing.
    pub fn tensors(&self) -> Vec<(&'static str, &MaskedTensor)> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { weights } => vec![("weights", weights)],
            LayerParams::Fc { weights, bias } => {
                let mut v = vec![("weights", weights)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerParams::BatchNorm(p) => vec![("gamma", &p.gamma), ("beta", &p.beta)],
        }
    }

    /// Density of the primary weight tensor, if any.
    pub fn weight_density(&self) -> Option<f64> {
        self.tensors().first().map(|(_, t)| t.density())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub fmt: QFormat,
    pub rounding: Rounding,
    pub lr: f64,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<LayerParams>,
}

impl TrainState {
    pub fn ctx(&self, layer: usize) -> RoundCtx {
        RoundCtx::for_layer(self.fmt, self.rounding, self.seed, self.step, layer)
    }
}

/// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) quantized to
/// nearest, zero biases, identity batch norm. Each layer draws from its own
/// ChaCha stream seeded by `(seed, layer)`.
pub fn init_state(net: &Network, fmt: QFormat, rounding: Rounding, lr: f64, seed: u64) -> Result<TrainState, NnError> {
    let shapes = net.shapes(1)?;
    let mut params = Vec::with_capacity(shapes.len());
    for (i, ls) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut uniform = |shape: Shape, fan_in: usize| -> Result<MaskedTensor, NnError> {
            let bound = (6.0 / fan_in as f64).sqrt().min(fmt.max_value());
            let d = (0..shape.len())
                .map(|_| quantize_nearest(rng.gen_range(-bound..bound), fmt))
                .collect::<Result<Vec<Fixed>, _>>()?;
            Ok(MaskedTensor::from_dense(shape, fmt, &d)?)
        };
        params.push(match &ls.op {
            LayerOp::Conv(c) => LayerParams::Conv { weights: uniform(c.weight_shape(), c.c * c.r * c.s)? },
            LayerOp::Fc(f) => LayerParams::Fc {
                weights: uniform(f.weight_shape(), f.n)?,
                bias: f.bias.then(|| MaskedTensor::zeros(f.bias_shape(), fmt)),
            },
            LayerOp::BatchNorm { channels, momentum } => {
                LayerParams::BatchNorm(BatchNormParams::identity(*channels, fmt, *momentum)?)
            }
            _ => LayerParams::None,
        });
    }
    Ok(TrainState { fmt, rounding, lr, seed, step: 0, params })
}

/// Per-layer counters of one forward (and optionally backward) pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub forward: OpStats,
    pub backward: OpStats,
    pub input_density: f64,
    pub output_density: f64,
    pub weight_density: Option<f64>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[i]` is the input of layer `i`; the last entry is the
    /// network output.
    pub activations: Vec<MaskedTensor>,
    pub batch_stats: Vec<Option<BatchStats>>,
    pub layers: Vec<LayerStats>,
}

impl ForwardTrace {
    pub fn output(&self) -> &MaskedTensor {
        self.activations.last().expect("at least the input")
    }
}

fn flat(x: &MaskedTensor) -> Result<MaskedTensor, NnError> {
    let s = x.shape();
    Ok(x.reshape(Shape::new(s.n(), 1, 1, s.len() / s.n()))?)
}

/// Runs every layer in order. In training mode batch norm uses batch
/// statistics (returned in the trace, running averages are not touched).
pub fn forward(net: &Network, state: &TrainState, input: &MaskedTensor, mode: Mode) -> Result<ForwardTrace, NnError> {
    let batch = input.shape().n();
    let shapes = net.shapes(batch)?;
    super::expect_shape(input, shapes.first().map(|s| s.input).unwrap_or(input.shape()), "network input")?;
    if state.params.len() != shapes.len() {
        return Err(NnError::Mismatch(format!(
            "state has {} layers, network has {}",
            state.params.len(),
            shapes.len()
        )));
    }
    let mut acts = vec![input.clone()];
    let mut bstats = Vec::with_capacity(shapes.len());
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, ls) in shapes.iter().enumerate() {
        let x = acts.last().expect("non-empty");
        let ctx = state.ctx(i);
        let mut st = OpStats::default();
        let mut bs = None;
        let y = match (&ls.op, &state.params[i]) {
            (LayerOp::Conv(c), LayerParams::Conv { weights }) => conv_forward(x, weights, c, &ctx, &mut st)?,
            (LayerOp::Fc(f), LayerParams::Fc { weights, bias }) => {
                fc_forward(&flat(x)?, weights, bias.as_ref(), f, &ctx, &mut st)?
            }
            (LayerOp::Relu, _) => relu(x)?,
            (LayerOp::Pool(p), _) => pool(x, p, &ctx, &mut st)?,
            (LayerOp::BatchNorm { .. }, LayerParams::BatchNorm(p)) => {
                let bn_mode = match mode {
                    Mode::Training => BnMode::Train,
                    Mode::Inference => BnMode::Infer,
                };
                let (y, b) = batchnorm_forward(x, p, bn_mode, &ctx, &mut st)?;
                bs = b;
                y
            }
            (LayerOp::Reshape(_), _) => x.reshape(ls.output)?,
            (LayerOp::Scalar { op, value }, _) => scalar(x, *op, *value, &mut st)?,
            (LayerOp::Loss(_), _) => x.clone(),
            (op, _) => return Err(NnError::Mismatch(format!("layer {i}: parameters do not match {op:?}"))),
        };
        layers.push(LayerStats {
            index: i,
            name: net.layers[i].display_name(i),
            kind: net.layers[i].kind.tag().to_string(),
            forward: st,
            backward: OpStats::default(),
            input_density: x.density(),
            output_density: y.density(),
            weight_density: state.params[i].weight_density(),
        });
        bstats.push(bs);
        acts.push(y);
    }
    Ok(ForwardTrace { activations: acts, batch_stats: bstats, layers })
}

/// Index of the largest entry of each sample (first on ties).
pub fn argmax_rows(t: &MaskedTensor) -> Vec<usize> {
    let n = t.shape().n();
    let k = t.shape().len() / n.max(1);
    let d = t.to_dense();
    d.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.raw() > row[best].raw() {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `w <- round(w - lr * g)`, computed in the wide accumulator so that
/// updates smaller than one step survive stochastic rounding with the
/// right probability. `lr` is first quantized to nearest in `w`'s format.
pub fn sgd_update(
    weights: &MaskedTensor,
    grad: &MaskedTensor,
    lr: f64,
    ctx: &RoundCtx,
    stats: &mut OpStats,
) -> Result<MaskedTensor, NnError> {
    super::expect_shape(grad, weights.shape(), "sgd gradient")?;
    let fmt = weights.format();
    let lr = quantize_nearest(lr, fmt)?;
    let g = grad.to_dense();
    let w = weights.to_dense();
    let d: Vec<Fixed> = w
        .iter()
        .zip(&g)
        .enumerate()
        .map(|(i, (&wv, &gv))| {
            if gv.is_zero() || lr.is_zero() {
                return wv;
            }
            let step = -(lr.raw() as i128) * gv.raw() as i128;
            let acc = wv.widen().add_raw(step, &mut stats.saturation);
            let mut rng = ctx.rng(Stream::Update, i);
            acc.round(ctx.mode, &mut rng, &mut stats.saturation)
        })
        .collect();
    Ok(MaskedTensor::from_dense(weights.shape(), fmt, &d)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Samples whose arg-max output matched the class label (0 for
    /// non-class targets).
    pub correct: usize,
    pub batch: usize,
    pub layers: Vec<LayerStats>,
}

enum ParamGrads {
    None,
    Conv(MaskedTensor),
    Fc(MaskedTensor, MaskedTensor),
    Bn(MaskedTensor, MaskedTensor),
}

/// One SGD step on a batch: forward with retained activations, loss,
/// backward through every layer (no input gradient for layer 0), then
/// parameter updates and running-statistic updates.
pub fn train_step(
    net: &Network,
    state: &mut TrainState,
    input: &MaskedTensor,
    target: &Target,
) -> Result<StepReport, NnError> {
    let loss_kind = net.loss_kind().ok_or(NnError::NoLoss)?;
    let batch = input.shape().n();
    let shapes = net.shapes(batch)?;
    let mut trace = forward(net, state, input, Mode::Training)?;
    let li = shapes.len() - 1;
    let mut lstats = OpStats::default();
    let (loss_value, mut grad) = loss(&trace.activations[li], target, loss_kind, &state.ctx(li), &mut lstats)?;
    trace.layers[li].backward = lstats;
    let correct = match target {
        Target::Classes(cls) => argmax_rows(&trace.activations[li]).iter().zip(cls).filter(|(a, b)| a == b).count(),
        Target::Values(_) => 0,
    };

    let mut grads: Vec<ParamGrads> = (0..shapes.len()).map(|_| ParamGrads::None).collect();
    for i in (0..li).rev() {
        let ls = &shapes[i];
        let x = &trace.activations[i];
        let ctx = state.ctx(i);
        let need = i > 0;
        let mut st = OpStats::default();
        grad = match (&ls.op, &state.params[i]) {
            (LayerOp::Conv(c), LayerParams::Conv { weights }) => {
                let (gi, gw) = conv_backward(&grad, x, weights, c, need, &ctx, &mut st)?;
                grads[i] = ParamGrads::Conv(gw);
                gi
            }
            (LayerOp::Fc(f), LayerParams::Fc { weights, .. }) => {
                let g = fc_backward(&grad, &flat(x)?, weights, f, need, &ctx, &mut st)?;
                grads[i] = ParamGrads::Fc(g.grad_weights, g.grad_bias);
                g.grad_input.reshape(x.shape())?
            }
            (LayerOp::Relu, _) => relu_backward(&grad, x)?,
            (LayerOp::Pool(p), _) => pool_backward(&grad, x, p, &ctx, &mut st)?,
            (LayerOp::BatchNorm { .. }, LayerParams::BatchNorm(p)) => {
                let g = batchnorm_backward(&grad, x, p, &ctx, &mut st)?;
                grads[i] = ParamGrads::Bn(g.grad_gamma, g.grad_beta);
                g.grad_input
            }
            (LayerOp::Reshape(_), _) => grad.reshape(x.shape())?,
            (LayerOp::Scalar { .. }, _) | (LayerOp::Loss(_), _) => grad,
            (op, _) => return Err(NnError::Mismatch(format!("layer {i}: parameters do not match {op:?}"))),
        };
        trace.layers[i].backward = st;
    }

    let lr = state.lr;
    for (i, g) in grads.into_iter().enumerate() {
        let ctx = state.ctx(i);
        let bias_ctx = RoundCtx { key: ctx.key ^ 0xB1A5_B1A5_B1A5_B1A5, ..ctx };
        let st = &mut trace.layers[i].backward;
        match (&mut state.params[i], g) {
            (LayerParams::Conv { weights }, ParamGrads::Conv(gw)) => {
                *weights = sgd_update(weights, &gw, lr, &ctx, st)?;
            }
            (LayerParams::Fc { weights, bias }, ParamGrads::Fc(gw, gb)) => {
                *weights = sgd_update(weights, &gw, lr, &ctx, st)?;
                if let Some(b) = bias {
                    *b = sgd_update(b, &gb, lr, &bias_ctx, st)?;
                }
            }
            (LayerParams::BatchNorm(p), ParamGrads::Bn(gg, gb)) => {
                p.gamma = sgd_update(&p.gamma, &gg, lr, &ctx, st)?;
                p.beta = sgd_update(&p.beta, &gb, lr, &bias_ctx, st)?;
                if let Some(b) = &trace.batch_stats[i] {
                    p.update_running(b);
                }
            }
            _ => {}
        }
    }
    let report = StepReport { step: state.step, loss: loss_value, correct, batch, layers: trace.layers };
    state.step += 1;
    Ok(report)
}

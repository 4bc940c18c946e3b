use serde::{Deserialize, Serialize};

use super::conv::conv_extent;
use super::{ConvSpec, FcSpec, LossKind, NnError, PoolSpec};
use crate::sparse::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Min,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarOp {
    Add,
    Sub,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.9
}

/// Declarative layer description as it appears in a network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Fc {
        outputs: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu {},
    Pool {
        op: PoolKind,
        window: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    BatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Reshape {
        shape: [usize; 3],
    },
    Scalar {
        op: ScalarOp,
        value: f64,
    },
    Loss {
        loss: LossKind,
    },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Relu {} => "relu",
            LayerKind::Pool { .. } => "pool",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Reshape { .. } => "reshape",
            LayerKind::Scalar { .. } => "scalar",
            LayerKind::Loss { .. } => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Map<String, serde_json::Value>")]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

// `flatten` cannot reject unknown keys, so the optional name is peeled off
// by hand and the rest goes through the strict enum.
impl TryFrom<serde_json::Map<String, serde_json::Value>> for LayerSpec {
    type Error = String;

    fn try_from(mut map: serde_json::Map<String, serde_json::Value>) -> Result<Self, Self::Error> {
        let name = match map.remove("name") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s),
            Some(other) => return Err(format!("layer name must be a string, got {other}")),
        };
        let kind = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(LayerSpec { name, kind })
    }
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { name: None, kind }
    }

    pub fn display_name(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}{index}", self.kind.tag()))
    }
}

/// A layer with its geometry resolved for a concrete batch size.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv(ConvSpec),
    /// Inputs are flattened to `[N, 1, 1, n]` first.
    Fc(FcSpec),
    Relu,
    Pool(PoolSpec),
    BatchNorm { channels: usize, momentum: f64 },
    Reshape([usize; 3]),
    Scalar { op: ScalarOp, value: f64 },
    Loss(LossKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub input: Shape,
    pub output: Shape,
    pub op: LayerOp,
}

impl LayerShape {
    /// Dense multiplies of one forward pass.
    pub fn forward_macs(&self) -> u64 {
        match &self.op {
            LayerOp::Conv(c) => c.macs(),
            LayerOp::Fc(f) => f.macs(self.input.n()),
            _ => 0,
        }
    }

    /// Elements of trainable parameters.
    pub fn param_count(&self) -> usize {
        match &self.op {
            LayerOp::Conv(c) => c.weight_shape().len(),
            LayerOp::Fc(f) => f.m * f.n + if f.bias { f.m } else { 0 },
            LayerOp::BatchNorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }
}

/// Ordered layer list applied to `[N, C, H, W]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub name: String,
    /// Per-sample `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Network {
    /// Shape inference; errors name the offending layer and field.
    pub fn shapes(&self, batch: usize) -> Result<Vec<LayerShape>, NnError> {
        if batch == 0 {
            return Err(NnError::shape(0, "batch", "must be positive"));
        }
        if let Some(i) = self.input.iter().position(|&d| d == 0) {
            return Err(NnError::Shape {
                layer: 0,
                field: format!("input[{i}]"),
                message: "must be positive".into(),
            });
        }
        let [c, h, w] = self.input;
        let mut cur = Shape::new(batch, c, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |field: &str, msg: String| NnError::shape(i, field, msg);
            let positive = |field: &str, v: usize| {
                if v == 0 {
                    Err(err(field, "must be positive".into()))
                } else {
                    Ok(())
                }
            };
            let (op, next) = match &layer.kind {
                LayerKind::Conv { filters, kernel, stride, pad } => {
                    positive("filters", *filters)?;
                    positive("kernel", *kernel)?;
                    positive("stride", *stride)?;
                    let ext = |size: usize, axis: &str| {
                        conv_extent(size, *pad, *kernel, *stride).ok_or_else(|| {
                            err("kernel", format!("kernel {kernel} exceeds padded {axis} {}", size + 2 * pad))
                        })
                    };
                    ext(cur.h(), "height")?;
                    ext(cur.w(), "width")?;
                    let spec = ConvSpec {
                        n: batch,
                        k: *filters,
                        c: cur.c(),
                        h: cur.h(),
                        w: cur.w(),
                        r: *kernel,
                        s: *kernel,
                        u: *stride,
                        v: *stride,
                        pad_h: *pad,
                        pad_w: *pad,
                    };
                    (LayerOp::Conv(spec), spec.output_shape())
                }
                LayerKind::Fc { outputs, bias } => {
                    positive("outputs", *outputs)?;
                    let spec = FcSpec { m: *outputs, n: cur.len() / batch, bias: *bias };
                    (LayerOp::Fc(spec), spec.output_shape(batch))
                }
                LayerKind::Relu {} => (LayerOp::Relu, cur),
                LayerKind::Pool { op, window, stride } => {
                    positive("window", *window)?;
                    positive("stride", *stride)?;
                    let spec = PoolSpec { kind: *op, window: *window, stride: *stride };
                    let next = spec.output_shape(cur).map_err(|e| match e {
                        NnError::Shape { message, .. } => err("window", message),
                        other => other,
                    })?;
                    (LayerOp::Pool(spec), next)
                }
                LayerKind::BatchNorm { momentum } => {
                    if !(0.0..=1.0).contains(momentum) {
                        return Err(err("momentum", format!("{momentum} is outside [0, 1]")));
                    }
                    (LayerOp::BatchNorm { channels: cur.c(), momentum: *momentum }, cur)
                }
                LayerKind::Reshape { shape } => {
                    let next = Shape::new(batch, shape[0], shape[1], shape[2]);
                    if next.len() != cur.len() {
                        return Err(err(
                            "shape",
                            format!("{shape:?} holds {} elements per sample, input has {}", next.len() / batch, cur.len() / batch),
                        ));
                    }
                    (LayerOp::Reshape(*shape), next)
                }
                LayerKind::Scalar { op, value } => {
                    if !value.is_finite() {
                        return Err(err("value", "must be finite".into()));
                    }
                    (LayerOp::Scalar { op: *op, value: *value }, cur)
                }
                LayerKind::Loss { loss } => {
                    if i != last {
                        return Err(err("kind", "loss must be the last layer".into()));
                    }
                    (LayerOp::Loss(*loss), cur)
                }
            };
            out.push(LayerShape { input: cur, output: next, op });
            cur = next;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.shapes(1).map(|_| ())
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Loss { loss }) => Some(*loss),
            _ => None,
        }
    }

    /// Per-sample output `[C, H, W]` of the last layer.
    pub fn output_dims(&self) -> Result<[usize; 3], NnError> {
        let shapes = self.shapes(1)?;
        let s = shapes.last().map(|l| l.output).unwrap_or(Shape::new(1, self.input[0], self.input[1], self.input[2]));
        Ok([s.c(), s.h(), s.w()])
    }
}

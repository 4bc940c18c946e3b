//! Functional CNN layers over masked fixed-point tensors.
//!
//! Every multiply-accumulate goes through [`MaskedVector::dot_wide`], i.e.
//! only index pairs where both operands are non-zero reach the multiplier.
//! Each output element is rounded exactly once, with its own LFSR derived
//! from `(key, stream, element index)` so results do not depend on the order
//! in which elements are computed.

mod batchnorm;
mod conv;
pub mod data;
mod fc;
mod graph;
mod loss;
mod ops;
mod train;

pub use batchnorm::{
    batch_stats, batchnorm_backward, batchnorm_forward, BatchNormParams, BatchStats, BnGrads, BnMode, BN_EPSILON,
};
pub use conv::{conv_backward, conv_forward, ConvSpec};
pub use fc::{fc_backward, fc_forward, FcGrads, FcSpec};
pub use graph::{LayerKind, LayerOp, LayerShape, LayerSpec, Network, PoolKind, ScalarOp};
pub use loss::{loss, softmax_rows, LossKind, Target};
pub use ops::{
    pad, pool, pool_backward, relu, relu_backward, reshape, scalar, PoolSpec,
};
pub use train::{
    argmax_rows, forward, init_state, sgd_update, train_step, ForwardTrace, LayerParams, LayerStats, Mode,
    StepReport, TrainState,
};

use thiserror::Error;

use crate::fixedpoint::{quantize_real, Fixed, FixedError, Lfsr, QFormat, Rounding, Saturation};
use crate::sparse::{MaskedTensor, MaskedVector, Shape, SparseError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: field `{field}`: {message}")]
    Shape { layer: usize, field: String, message: String },
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("target class {class} out of range for {classes} classes")]
    InvalidTarget { class: usize, classes: usize },
    #[error("network has no loss layer")]
    NoLoss,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

impl NnError {
    pub(crate) fn shape(layer: usize, field: &str, message: impl Into<String>) -> Self {
        NnError::Shape { layer, field: field.to_string(), message: message.into() }
    }
}

pub(crate) fn expect_shape(t: &MaskedTensor, shape: Shape, what: &str) -> Result<(), NnError> {
    if t.shape() != shape {
        return Err(NnError::Mismatch(format!("{what}: expected {shape}, got {}", t.shape())));
    }
    Ok(())
}

/// Which quantity an element rounding belongs to; keeps the derived random
/// streams of different outputs of one layer apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Forward = 1,
    GradInput = 2,
    GradWeight = 3,
    GradBias = 4,
    Loss = 5,
    Update = 6,
    Quantize = 7,
}

/// Numeric format and rounding policy plus the random key for one layer
/// invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundCtx {
    pub fmt: QFormat,
    pub mode: Rounding,
    pub key: u64,
}

impl RoundCtx {
    pub fn new(fmt: QFormat, mode: Rounding, key: u64) -> Self {
        RoundCtx { fmt, mode, key }
    }

    pub fn rng(&self, stream: Stream, index: usize) -> Lfsr {
        Lfsr::derive(self.key, stream as u64, index as u64)
    }

    /// Key for `(seed, step, layer)`.
    pub fn for_layer(fmt: QFormat, mode: Rounding, seed: u64, step: u64, layer: usize) -> Self {
        let key = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (layer as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
        RoundCtx { fmt, mode, key }
    }

    pub(crate) fn quantize(
        &self,
        v: f64,
        stream: Stream,
        index: usize,
        sat: &mut Saturation,
    ) -> Result<Fixed, FixedError> {
        let mut rng = self.rng(stream, index);
        quantize_real(v, self.fmt, self.mode, &mut rng, sat)
    }

    pub(crate) fn quantize_tensor(
        &self,
        values: &[f64],
        shape: Shape,
        stream: Stream,
        sat: &mut Saturation,
    ) -> Result<MaskedTensor, NnError> {
        let dense = values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.quantize(v, stream, i, sat))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MaskedTensor::from_dense(shape, self.fmt, &dense)?)
    }
}

/// Work and saturation counters gathered while executing operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OpStats {
    /// Multiplies a dense engine would perform.
    pub dense_macs: u64,
    /// Multiplies actually performed on aligned non-zero pairs.
    pub aligned_macs: u64,
    pub saturation: Saturation,
}

impl OpStats {
    pub fn merge(&mut self, other: &OpStats) {
        self.dense_macs += other.dense_macs;
        self.aligned_macs += other.aligned_macs;
        self.saturation.merge(other.saturation);
    }
}

/// Dense row-major view used for gathering windows.
pub(crate) fn dense_raw(t: &MaskedTensor) -> Vec<i64> {
    t.to_dense().into_iter().map(Fixed::raw).collect()
}

pub(crate) fn compress_raw(raw: &[i64], fmt: QFormat) -> MaskedVector {
    let dense: Vec<Fixed> = raw
        .iter()
        .map(|&r| Fixed::from_raw(r, fmt).expect("raw values come from in-range tensors"))
        .collect();
    MaskedVector::compress(&dense, fmt)
}

pub(crate) fn from_raw_tensor(shape: Shape, fmt: QFormat, raw: &[i64]) -> Result<MaskedTensor, NnError> {
    let dense: Vec<Fixed> = raw
        .iter()
        .map(|&r| Fixed::from_raw(r, fmt))
        .collect::<Result<_, _>>()?;
    Ok(MaskedTensor::from_dense(shape, fmt, &dense)?)
}

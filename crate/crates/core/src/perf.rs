//! Analytical cycle and energy model of the accelerator.
//!
//! Each MAC layer is tiled in the fixed unrolling priority batch, weight,
//! input channel, input, output channel. Weight tiles (groups of filters)
//! are outermost and fetched once. The input stays resident when it fits in
//! half of the activation buffer; otherwise it streams in batch or row
//! chunks once per weight tile. Within a chunk, filters are split further so
//! that outputs fit the other half.
//! Per-layer time is `max(compute, memory) + pipeline fill`.
//!
//! Energies are integer femtojoules so that totals close exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{QFormat, Saturation};
use crate::mem::{MemError, MemRequest, MemoryConfig, MemorySystem};
use crate::nn::{LayerOp, LayerShape, LayerStats, Mode, Network, NnError};
use crate::sparse::LANE_WIDTH;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("layer {layer}: {message}")]
    Capacity { layer: usize, message: String },
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("invalid accelerator config: {0}")]
    Config(String),
    #[error("density: {0}")]
    Density(String),
}

/// The only supported unrolling priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopOrder {
    #[default]
    BatchWeightInChannelInputOutChannel,
}

/// Per-event energies in femtojoules (buffer costs per byte). The defaults
/// are placeholders, not calibrated values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub mac_fj: u64,
    pub round_fj: u64,
    pub scan_per_bit_fj: u64,
    pub weight_buf_read_fj: u64,
    pub weight_buf_write_fj: u64,
    pub act_buf_read_fj: u64,
    pub act_buf_write_fj: u64,
    pub mask_buf_read_fj: u64,
    pub mask_buf_write_fj: u64,
    pub leak_per_cycle_fj: u64,
    /// Host-side element operation (batch-norm statistics, loss).
    pub host_op_fj: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            mac_fj: 250,
            round_fj: 60,
            scan_per_bit_fj: 2,
            weight_buf_read_fj: 90,
            weight_buf_write_fj: 110,
            act_buf_read_fj: 70,
            act_buf_write_fj: 90,
            mask_buf_read_fj: 30,
            mask_buf_write_fj: 40,
            leak_per_cycle_fj: 20_000,
            host_op_fj: 5_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub clock_hz: f64,
    pub num_pes: u64,
    pub lanes_per_pe: u64,
    pub mults_per_lane: u64,
    pub weight_buffer_bytes: u64,
    pub activation_buffer_bytes: u64,
    pub mask_buffer_bytes: u64,
    pub loop_order: LoopOrder,
    pub qformat: QFormat,
    pub energy: EnergyConfig,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            clock_hz: 700.0e6,
            num_pes: 64,
            lanes_per_pe: 72,
            mults_per_lane: 16,
            weight_buffer_bytes: 24 << 20,
            activation_buffer_bytes: 12 << 20,
            mask_buffer_bytes: 4 << 20,
            loop_order: LoopOrder::default(),
            qformat: QFormat::Q4_16,
            energy: EnergyConfig::default(),
        }
    }
}

impl AcceleratorConfig {
    pub fn validate(&self) -> Result<(), PerfError> {
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(PerfError::Config("clock_hz must be positive".into()));
        }
        let counts = [
            ("num_pes", self.num_pes),
            ("lanes_per_pe", self.lanes_per_pe),
            ("mults_per_lane", self.mults_per_lane),
            ("weight_buffer_bytes", self.weight_buffer_bytes),
            ("activation_buffer_bytes", self.activation_buffer_bytes),
            ("mask_buffer_bytes", self.mask_buffer_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PerfError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Multipliers across the chip.
    pub fn macs_per_cycle(&self) -> u64 {
        self.num_pes * self.lanes_per_pe * self.mults_per_lane
    }

    /// Element-wise operations per cycle (one per lane).
    pub fn elementwise_per_cycle(&self) -> u64 {
        self.num_pes * self.lanes_per_pe
    }

    pub fn element_bytes(&self) -> u64 {
        self.qformat.storage_bytes() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weights,
    Input,
    Output,
    /// Input retained from the forward pass.
    Retained,
    GradOutput,
    GradInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

/// One DMA transfer of a tensor slice, in elements (uncompressed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dma {
    pub role: TensorRole,
    pub direction: Direction,
    pub elements: u64,
}

/// Half-open index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

fn chunks(total: usize, step: usize) -> impl Iterator<Item = Span> {
    (0..total).step_by(step.max(1)).map(move |s| Span { start: s, len: step.min(total - s) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub k: Span,
    pub n: Span,
    pub p: Span,
    pub dense_macs: u64,
}

/// Whether a layer's input and output stay in the activation buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Residency {
    pub input_on_chip: bool,
    pub output_on_chip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPlan {
    pub layer: usize,
    pub kind: String,
    pub tiles: Vec<Tile>,
    pub dma: Vec<Dma>,
    pub dense_macs: u64,
    /// Output elements produced by rounding units.
    pub roundings: u64,
    pub elementwise_ops: u64,
    pub host_ops: u64,
    pub input_elements: u64,
    pub output_elements: u64,
    pub weight_elements: u64,
}

impl WorkloadPlan {
    pub fn dma_elements(&self, role: TensorRole) -> u64 {
        self.dma.iter().filter(|d| d.role == role).map(|d| d.elements).sum()
    }
}

/// Dimensions of a MAC layer; FC layers are 1x1 convolutions over 1x1 maps.
#[derive(Debug, Clone, Copy)]
struct MacDims {
    n: usize,
    k: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    s: usize,
    u: usize,
    pad: usize,
    p: usize,
    q: usize,
    bias: bool,
}

impl MacDims {
    fn from_op(op: &LayerOp) -> Option<Self> {
        match op {
            LayerOp::Conv(c) => Some(MacDims {
                n: c.n,
                k: c.k,
                c: c.c,
                h: c.h,
                w: c.w,
                r: c.r,
                s: c.s,
                u: c.u,
                pad: c.pad_h,
                p: c.p(),
                q: c.q(),
                bias: false,
            }),
            LayerOp::Fc(f) => Some(MacDims {
                n: 0,
                k: f.m,
                c: f.n,
                h: 1,
                w: 1,
                r: 1,
                s: 1,
                u: 1,
                pad: 0,
                p: 1,
                q: 1,
                bias: f.bias,
            }),
            _ => None,
        }
    }

    fn per_filter(&self) -> usize {
        self.c * self.r * self.s + self.bias as usize
    }

    /// Unpadded input rows touched by output rows `p`.
    fn input_rows(&self, p: Span) -> usize {
        let lo = (p.start * self.u).saturating_sub(self.pad);
        let hi = ((p.start + p.len - 1) * self.u + self.r).saturating_sub(self.pad).min(self.h);
        hi.saturating_sub(lo)
    }

    fn tile_macs(&self, k: Span, n: Span, p: Span) -> u64 {
        (n.len * k.len * self.c * self.r * self.s * p.len * self.q) as u64
    }
}

/// Tiles a layer against the buffers and lists its DMA transfers.
pub fn plan_layer(
    index: usize,
    layer: &LayerShape,
    cfg: &AcceleratorConfig,
    residency: Residency,
) -> Result<WorkloadPlan, PerfError> {
    let eb = cfg.element_bytes();
    let input_elements = layer.input.len() as u64;
    let output_elements = layer.output.len() as u64;
    let kind = op_name(&layer.op).to_string();
    let cap_err = |message: String| PerfError::Capacity { layer: index, message };

    let Some(mut d) = MacDims::from_op(&layer.op) else {
        // Element-wise layers: one pass, no MACs.
        let (ew, host) = match &layer.op {
            LayerOp::Reshape(_) => (0, 0),
            LayerOp::BatchNorm { .. } => (2 * input_elements, input_elements),
            LayerOp::Loss(_) => (input_elements, input_elements),
            _ => (input_elements, 0),
        };
        let mut dma = Vec::new();
        if !matches!(layer.op, LayerOp::Reshape(_)) {
            if !residency.input_on_chip {
                dma.push(Dma { role: TensorRole::Input, direction: Direction::Read, elements: input_elements });
            }
            if !residency.output_on_chip {
                dma.push(Dma { role: TensorRole::Output, direction: Direction::Write, elements: output_elements });
            }
        }
        let weight_elements = match &layer.op {
            LayerOp::BatchNorm { channels, .. } => 2 * *channels as u64,
            _ => 0,
        };
        if weight_elements > 0 {
            dma.push(Dma { role: TensorRole::Weights, direction: Direction::Read, elements: weight_elements });
        }
        let roundings = if ew > 0 { output_elements } else { 0 };
        return Ok(WorkloadPlan {
            layer: index,
            kind,
            tiles: vec![],
            dma,
            dense_macs: 0,
            roundings,
            elementwise_ops: ew,
            host_ops: host,
            input_elements,
            output_elements,
            weight_elements,
        });
    };
    d.n = layer.input.n();

    let weight_cap = (cfg.weight_buffer_bytes / eb) as usize;
    // The activation buffer is split into an input half and an output half.
    let half = (cfg.activation_buffer_bytes / eb) as usize / 2;
    let k_tile = d.k.min(weight_cap / d.per_filter());
    if k_tile == 0 {
        return Err(cap_err(format!(
            "one filter ({} elements) exceeds the weight buffer ({} elements)",
            d.per_filter(),
            weight_cap
        )));
    }
    let in_img = d.c * d.h * d.w;
    let input_resident = residency.input_on_chip || d.n * in_img <= half;
    let (n_tile, p_tile) = if input_resident {
        (d.n, d.p)
    } else if in_img <= half {
        (half / in_img, d.p)
    } else {
        let fits = |pt: usize| d.c * d.w * d.input_rows(Span { start: 0, len: pt }).max(1) <= half;
        let mut pt = 0;
        while pt < d.p && fits(pt + 1) {
            pt += 1;
        }
        if pt == 0 {
            return Err(cap_err(format!(
                "the input window of one output row does not fit the activation buffer ({half} elements per half)"
            )));
        }
        (1, pt)
    };
    // Output channels per tile so that the tile's outputs fit the output half.
    let out_per_k = n_tile * p_tile * d.q;
    let k_sub = k_tile.min(half / out_per_k);
    if k_sub == 0 {
        return Err(cap_err(format!("{out_per_k} outputs of one filter exceed the activation buffer half ({half})")));
    }
    let mask_bits = (k_tile * d.per_filter() + n_tile * d.c * d.w * d.h.min(d.input_rows(Span { start: 0, len: p_tile }).max(1)) + k_sub * out_per_k) as u64;
    if mask_bits.div_ceil(8) > cfg.mask_buffer_bytes {
        return Err(cap_err("tile masks exceed the mask buffer".into()));
    }

    let mut tiles = Vec::new();
    let mut dma = Vec::new();
    if input_resident && !residency.input_on_chip {
        dma.push(Dma { role: TensorRole::Input, direction: Direction::Read, elements: (d.n * in_img) as u64 });
    }
    for wt in chunks(d.k, k_tile) {
        dma.push(Dma {
            role: TensorRole::Weights,
            direction: Direction::Read,
            elements: (wt.len * d.per_filter()) as u64,
        });
        for n in chunks(d.n, n_tile) {
            for p in chunks(d.p, p_tile) {
                if !input_resident {
                    dma.push(Dma {
                        role: TensorRole::Input,
                        direction: Direction::Read,
                        elements: (n.len * d.c * d.w * d.input_rows(p)) as u64,
                    });
                }
                for ks in chunks(wt.len, k_sub) {
                    let k = Span { start: wt.start + ks.start, len: ks.len };
                    if !residency.output_on_chip {
                        dma.push(Dma {
                            role: TensorRole::Output,
                            direction: Direction::Write,
                            elements: (n.len * k.len * p.len * d.q) as u64,
                        });
                    }
                    tiles.push(Tile { k, n, p, dense_macs: d.tile_macs(k, n, p) });
                }
            }
        }
    }
    let dense_macs = tiles.iter().map(|t| t.dense_macs).sum();
    Ok(WorkloadPlan {
        layer: index,
        kind,
        tiles,
        dma,
        dense_macs,
        roundings: output_elements,
        elementwise_ops: 0,
        host_ops: 0,
        input_elements,
        output_elements,
        weight_elements: (d.k * d.per_filter()) as u64,
    })
}

fn op_name(op: &LayerOp) -> &'static str {
    match op {
        LayerOp::Conv(_) => "conv",
        LayerOp::Fc(_) => "fc",
        LayerOp::Relu => "relu",
        LayerOp::Pool(_) => "pool",
        LayerOp::BatchNorm { .. } => "batch_norm",
        LayerOp::Reshape(_) => "reshape",
        LayerOp::Scalar { .. } => "scalar",
        LayerOp::Loss(_) => "loss",
    }
}

/// Densities and aligned-pair counts feeding the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub input: f64,
    pub weight: f64,
    pub output: f64,
    /// Multiplies on aligned non-zero pairs in the forward pass.
    pub aligned_forward: u64,
    /// Same for the backward pass (zero for inference).
    pub aligned_backward: u64,
}

impl DensityStats {
    /// Independent operands of density `d`: aligned = dense * d^2 per pass.
    pub fn assumed(d: f64, dense_macs: u64, mode: Mode) -> Self {
        let fwd = (dense_macs as f64 * d * d).round() as u64;
        let bwd = match mode {
            Mode::Training => 2 * fwd,
            Mode::Inference => 0,
        };
        DensityStats { input: d, weight: d, output: d, aligned_forward: fwd, aligned_backward: bwd }
    }

    fn validate(&self, layer: usize) -> Result<(), PerfError> {
        for v in [self.input, self.weight, self.output] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PerfError::Density(format!("layer {layer}: density {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    ComputeBound,
    MemoryBound,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mac_fj: u64,
    pub rounding_fj: u64,
    pub sparsity_scan_fj: u64,
    pub weight_buffer_fj: u64,
    pub activation_buffer_fj: u64,
    pub mask_buffer_fj: u64,
    pub dram_fj: u64,
    pub host_fj: u64,
    pub leakage_fj: u64,
    pub total_fj: u64,
}

impl EnergyBreakdown {
    pub fn parts_sum(&self) -> u64 {
        self.mac_fj
            + self.rounding_fj
            + self.sparsity_scan_fj
            + self.weight_buffer_fj
            + self.activation_buffer_fj
            + self.mask_buffer_fj
            + self.dram_fj
            + self.host_fj
            + self.leakage_fj
    }

    fn close(mut self) -> Self {
        self.total_fj = self.parts_sum();
        self
    }

    fn add(&mut self, o: &EnergyBreakdown) {
        self.mac_fj += o.mac_fj;
        self.rounding_fj += o.rounding_fj;
        self.sparsity_scan_fj += o.sparsity_scan_fj;
        self.weight_buffer_fj += o.weight_buffer_fj;
        self.activation_buffer_fj += o.activation_buffer_fj;
        self.mask_buffer_fj += o.mask_buffer_fj;
        self.dram_fj += o.dram_fj;
        self.host_fj += o.host_fj;
        self.leakage_fj += o.leakage_fj;
        self.total_fj += o.total_fj;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub compute_cycles: u64,
    pub fill_cycles: u64,
    pub memory_cycles: u64,
    pub total_cycles: u64,
    pub aligned_macs: u64,
    pub dma_read_bytes: u64,
    pub dma_write_bytes: u64,
    pub energy: EnergyBreakdown,
    pub bottleneck: Bottleneck,
}

/// Compute-bound iff compute cycles are at least the memory cycles.
pub fn classify_bottleneck(compute_cycles: u64, memory_cycles: u64) -> Bottleneck {
    if compute_cycles >= memory_cycles {
        Bottleneck::ComputeBound
    } else {
        Bottleneck::MemoryBound
    }
}

/// Splits `total` over `weights` in proportion, exactly (largest remainder,
/// ties to the earliest).
fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u64> = weights.iter().map(|&w| (total as u128 * w as u128 / sum) as u64).collect();
    let mut left = total - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((total as u128 * weights[i] as u128) % sum));
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn mac_cycles(aligned: u64, per_cycle: u64) -> u64 {
    aligned.div_ceil(per_cycle)
}

/// Extra transfers of the backward pass.
fn backward_dma(plan: &WorkloadPlan, first_layer: bool) -> Vec<Dma> {
    let mut v = vec![
        Dma { role: TensorRole::Retained, direction: Direction::Read, elements: plan.input_elements },
        Dma { role: TensorRole::GradOutput, direction: Direction::Read, elements: plan.output_elements },
    ];
    if !first_layer {
        v.push(Dma { role: TensorRole::GradInput, direction: Direction::Write, elements: plan.input_elements });
    }
    if plan.weight_elements > 0 {
        v.push(Dma { role: TensorRole::Weights, direction: Direction::Read, elements: plan.weight_elements });
        v.push(Dma { role: TensorRole::Weights, direction: Direction::Write, elements: plan.weight_elements });
    }
    v
}

fn density_of(role: TensorRole, ds: &DensityStats) -> f64 {
    match role {
        TensorRole::Weights => ds.weight,
        TensorRole::Input | TensorRole::Retained | TensorRole::GradInput => ds.input,
        TensorRole::Output | TensorRole::GradOutput => ds.output,
    }
}

/// Compressed size: payload of the expected non-zeros plus one mask bit per
/// element.
fn dma_bytes(dma: &Dma, ds: &DensityStats, eb: u64) -> (u64, u64) {
    let nnz = (dma.elements as f64 * density_of(dma.role, ds)).round() as u64;
    (nnz * eb, dma.elements.div_ceil(8))
}

fn region(role: TensorRole) -> u64 {
    match role {
        TensorRole::Weights => 0,
        TensorRole::Input | TensorRole::Retained => 1,
        TensorRole::Output => 2,
        TensorRole::GradOutput | TensorRole::GradInput => 3,
    }
}

/// Runs the layer's transfers through the memory model, all queued at time
/// zero, and returns (end time in ps, DRAM energy).
fn memory_time(transfers: &[(Dma, u64)], mem: &MemoryConfig) -> Result<(u64, u64), PerfError> {
    if transfers.is_empty() {
        return Ok((0, 0));
    }
    let mut sys = MemorySystem::new(*mem)?;
    let region_bytes = (mem.capacity_bytes / 4) / mem.row_bytes * mem.row_bytes;
    let mut offsets = [0u64; 4];
    for (dma, bytes) in transfers {
        if *bytes == 0 {
            continue;
        }
        let len = bytes.div_ceil(mem.row_bytes) * mem.row_bytes;
        let r = region(dma.role) as usize;
        if len > region_bytes {
            return Err(PerfError::Mem(MemError::OutOfRange { address: 0, bytes: len, capacity: region_bytes }));
        }
        if offsets[r] + len > region_bytes {
            offsets[r] = 0;
        }
        let addr = r as u64 * region_bytes + offsets[r];
        offsets[r] += len;
        let req = match dma.direction {
            Direction::Read => MemRequest::read(addr, len, 0),
            Direction::Write => MemRequest::write(addr, len, 0),
        };
        sys.access(&req)?;
    }
    let end = sys.horizon();
    let rep = sys.finish(end);
    Ok((rep.end_ps, rep.energy.total_fj))
}

/// Cycles and energy of one planned layer.
pub fn estimate_layer(
    plan: &WorkloadPlan,
    ds: &DensityStats,
    cfg: &AcceleratorConfig,
    mem: &MemoryConfig,
    mode: Mode,
) -> Result<LayerCost, PerfError> {
    ds.validate(plan.layer)?;
    let e = cfg.energy;
    let eb = cfg.element_bytes();
    let mpc = cfg.macs_per_cycle();
    let train = mode == Mode::Training;

    let weights: Vec<u64> = plan.tiles.iter().map(|t| t.dense_macs).collect();
    let fwd = apportion(ds.aligned_forward, &weights);
    let bwd = apportion(if train { ds.aligned_backward } else { 0 }, &weights);
    let mut compute: u64 = fwd.iter().chain(&bwd).map(|&a| mac_cycles(a, mpc)).sum();
    let ew_ops = plan.elementwise_ops * if train { 2 } else { 1 };
    compute += ew_ops.div_ceil(cfg.elementwise_per_cycle());
    let passes = if train && !plan.tiles.is_empty() { 2 } else { 1 };
    let fill = plan.tiles.len() as u64 * LANE_WIDTH as u64 * passes;

    let mut dmas = plan.dma.clone();
    if train {
        dmas.extend(backward_dma(plan, plan.layer == 0));
    }
    let mut transfers = Vec::with_capacity(2 * dmas.len());
    let (mut rd, mut wr) = (0u64, 0u64);
    let (mut wbuf_w, mut abuf_w, mut mask_w) = (0u64, 0u64, 0u64);
    for d in &dmas {
        let (payload, mask) = dma_bytes(d, ds, eb);
        match d.direction {
            Direction::Read => rd += payload + mask,
            Direction::Write => wr += payload + mask,
        }
        if d.direction == Direction::Read {
            match d.role {
                TensorRole::Weights => wbuf_w += payload,
                _ => abuf_w += payload,
            }
            mask_w += mask;
        }
        transfers.push((*d, payload));
        transfers.push((*d, mask));
    }
    let (mem_ps, dram_fj) = memory_time(&transfers, mem)?;
    let memory = ((mem_ps as f64) * cfg.clock_hz / 1e12).ceil() as u64;
    let total = compute.max(memory) + fill;

    let aligned = ds.aligned_forward + if train { ds.aligned_backward } else { 0 };
    let dense_all = plan.dense_macs * if train { 3 } else { 1 };
    let scan_bits = 2 * dense_all;
    let roundings = plan.roundings * if train { 3 } else { 1 };
    let out_bytes = (plan.output_elements as f64 * ds.output).round() as u64 * eb;
    let energy = EnergyBreakdown {
        mac_fj: aligned * e.mac_fj,
        rounding_fj: roundings * e.round_fj,
        sparsity_scan_fj: scan_bits * e.scan_per_bit_fj,
        weight_buffer_fj: aligned * eb * e.weight_buf_read_fj + wbuf_w * e.weight_buf_write_fj,
        activation_buffer_fj: aligned * eb * e.act_buf_read_fj + (abuf_w + out_bytes) * e.act_buf_write_fj,
        mask_buffer_fj: mask_w * e.mask_buf_write_fj + scan_bits.div_ceil(8) * e.mask_buf_read_fj,
        dram_fj,
        host_fj: plan.host_ops * if train { 2 } else { 1 } * e.host_op_fj,
        leakage_fj: total * e.leak_per_cycle_fj,
        total_fj: 0,
    }
    .close();
    Ok(LayerCost {
        compute_cycles: compute,
        fill_cycles: fill,
        memory_cycles: memory,
        total_cycles: total,
        aligned_macs: aligned,
        dma_read_bytes: rd,
        dma_write_bytes: wr,
        energy,
        bottleneck: classify_bottleneck(compute, memory),
    })
}

/// Where per-layer densities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DensitySource {
    /// Every operand has this density; aligned work is `dense * d^2`.
    Assumed(f64),
    /// Per-layer counters from a functional run of the same network and
    /// batch size.
    Measured(Vec<LayerStats>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub tiles: usize,
    pub dense_macs: u64,
    pub input_density: f64,
    pub weight_density: f64,
    pub output_density: f64,
    pub input_on_chip: bool,
    pub output_on_chip: bool,
    #[serde(flatten)]
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub network: String,
    pub mode: Mode,
    pub density_source: String,
    pub batch: usize,
    pub clock_hz: f64,
    pub macs_per_cycle: u64,
    pub layers: Vec<LayerReport>,
    pub total_cycles: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub fill_cycles: u64,
    pub dense_macs: u64,
    pub aligned_macs: u64,
    pub energy: EnergyBreakdown,
    pub latency_s: f64,
    pub energy_j: f64,
    pub power_w: f64,
    /// Aligned MACs over the MAC capacity of the elapsed cycles.
    pub utilization: f64,
    pub saturation: Saturation,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn latency_seconds(cycles: u64, clock_hz: f64) -> f64 {
    cycles as f64 / clock_hz
}

pub fn average_power(energy_j: f64, latency_s: f64) -> f64 {
    if latency_s > 0.0 {
        energy_j / latency_s
    } else {
        0.0
    }
}

/// Per-layer plans and costs for `net` at `batch`, summed into a report.
///
/// A layer output stays in the activation buffer (no write, and no read by
/// the next layer) when it fits in half of it. The network input is always
/// read and the final output always written. In training mode every layer
/// output is also written out for the backward pass.
pub fn simulate_network(
    net: &Network,
    batch: usize,
    cfg: &AcceleratorConfig,
    mem: &MemoryConfig,
    mode: Mode,
    density: &DensitySource,
) -> Result<SimReport, PerfError> {
    cfg.validate()?;
    mem.validate()?;
    let shapes = net.shapes(batch)?;
    let eb = cfg.element_bytes();
    let fits = |elems: usize| elems as u64 * eb <= cfg.activation_buffer_bytes / 2;
    let last = shapes.len().saturating_sub(1);
    let mut layers = Vec::with_capacity(shapes.len());
    let mut saturation = Saturation::default();
    if let DensitySource::Measured(m) = density {
        if m.len() != shapes.len() {
            return Err(PerfError::Density(format!("{} measured layers for {} network layers", m.len(), shapes.len())));
        }
    }
    for (i, ls) in shapes.iter().enumerate() {
        let input_on_chip = i > 0 && fits(ls.input.len());
        let output_on_chip = i < last && fits(ls.output.len()) && mode == Mode::Inference;
        let res = Residency { input_on_chip, output_on_chip };
        let plan = plan_layer(i, ls, cfg, res)?;
        let ds = match density {
            DensitySource::Assumed(d) => {
                if !(0.0..=1.0).contains(d) {
                    return Err(PerfError::Density(format!("assumed density {d} outside [0, 1]")));
                }
                DensityStats::assumed(*d, plan.dense_macs, mode)
            }
            DensitySource::Measured(m) => {
                let s = &m[i];
                saturation.merge(s.forward.saturation);
                saturation.merge(s.backward.saturation);
                if s.forward.dense_macs != plan.dense_macs {
                    return Err(PerfError::Density(format!(
                        "layer {i}: measured {} dense MACs, model expects {}",
                        s.forward.dense_macs, plan.dense_macs
                    )));
                }
                DensityStats {
                    input: s.input_density,
                    weight: s.weight_density.unwrap_or(1.0),
                    output: s.output_density,
                    aligned_forward: s.forward.aligned_macs,
                    aligned_backward: if mode == Mode::Training { s.backward.aligned_macs } else { 0 },
                }
            }
        };
        let cost = estimate_layer(&plan, &ds, cfg, mem, mode)?;
        layers.push(LayerReport {
            index: i,
            name: net.layers[i].display_name(i),
            kind: plan.kind.clone(),
            tiles: plan.tiles.len(),
            dense_macs: plan.dense_macs * if mode == Mode::Training { 3 } else { 1 },
            input_density: ds.input,
            weight_density: ds.weight,
            output_density: ds.output,
            input_on_chip,
            output_on_chip,
            cost,
        });
    }
    Ok(assemble(net, batch, cfg, mode, density, layers, saturation))
}

fn assemble(
    net: &Network,
    batch: usize,
    cfg: &AcceleratorConfig,
    mode: Mode,
    density: &DensitySource,
    layers: Vec<LayerReport>,
    saturation: Saturation,
) -> SimReport {
    let mut energy = EnergyBreakdown::default();
    for l in &layers {
        energy.add(&l.cost.energy);
    }
    let sum = |f: fn(&LayerReport) -> u64| layers.iter().map(f).sum::<u64>();
    let total_cycles = sum(|l| l.cost.total_cycles);
    let aligned = sum(|l| l.cost.aligned_macs);
    let latency_s = latency_seconds(total_cycles, cfg.clock_hz);
    let energy_j = energy.total_fj as f64 * 1e-15;
    let utilization = if total_cycles == 0 {
        0.0
    } else {
        aligned as f64 / (total_cycles as f64 * cfg.macs_per_cycle() as f64)
    };
    SimReport {
        schema_version: REPORT_SCHEMA_VERSION,
        network: net.name.clone(),
        mode,
        density_source: match density {
            DensitySource::Assumed(d) => format!("assumed:{d}"),
            DensitySource::Measured(_) => "measured".into(),
        },
        batch,
        clock_hz: cfg.clock_hz,
        macs_per_cycle: cfg.macs_per_cycle(),
        total_cycles,
        compute_cycles: sum(|l| l.cost.compute_cycles),
        memory_cycles: sum(|l| l.cost.memory_cycles),
        fill_cycles: sum(|l| l.cost.fill_cycles),
        dense_macs: sum(|l| l.dense_macs),
        aligned_macs: aligned,
        energy,
        latency_s,
        energy_j,
        power_w: average_power(energy_j, latency_s),
        utilization,
        saturation,
        layers,
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, DensitySetting, FrontError, NetworkDescription, RunConfig};
use crate::fixedpoint::Saturation;
use crate::nn::data::{random_images, two_class_bars, Dataset};
use crate::nn::{
    argmax_rows, forward, init_state, loss, train_step, LayerStats, Mode, Network, OpStats, Target, TrainState,
};
use crate::perf::{simulate_network, DensitySource, SimReport};

const DATA_SALT: u64 = 0xDA7A_5EED;

/// Synthetic data matching the network: the two-bar task for single-channel
/// square inputs with two classes, sparse random images otherwise.
pub fn dataset_for(net: &Network, samples: usize, seed: u64) -> Result<Dataset, FrontError> {
    let classes: usize = net.output_dims()?.iter().product();
    let [c, h, w] = net.input;
    Ok(if c == 1 && h == w && classes == 2 {
        two_class_bars(samples, h, 0.5, seed ^ DATA_SALT)
    } else {
        random_images(net.input, samples, classes, 0.5, seed ^ DATA_SALT)
    })
}

fn batch_size(desc: &NetworkDescription, cfg: &RunConfig, mode: Mode) -> usize {
    cfg.batch.unwrap_or_else(|| desc.batch_for(mode))
}

fn initial_state(desc: &NetworkDescription, cfg: &RunConfig, seed: u64) -> Result<TrainState, FrontError> {
    let net = desc.network();
    match &desc.checkpoint {
        Some(dir) => {
            let mut st = load_checkpoint(dir, &net)?;
            st.lr = cfg.lr;
            st.rounding = cfg.rounding;
            Ok(st)
        }
        None => Ok(init_state(&net, cfg.qformat(), cfg.rounding, cfg.lr, seed)?),
    }
}

/// Per-layer counters from one functional pass over one batch: forward only
/// for inference, a full training step (on a copy of the state) otherwise.
pub fn measure(
    net: &Network,
    state: &TrainState,
    data: &Dataset,
    batch: usize,
    mode: Mode,
) -> Result<Vec<LayerStats>, FrontError> {
    let idx: Vec<usize> = (0..batch).map(|i| i % data.len()).collect();
    let (x, labels) = data.batch(&idx, state.fmt)?;
    Ok(match mode {
        Mode::Inference => forward(net, state, &x, Mode::Inference)?.layers,
        Mode::Training => {
            let mut scratch = state.clone();
            train_step(net, &mut scratch, &x, &Target::Classes(labels))?.layers
        }
    })
}

/// Performance report for the configured mode and density source.
pub fn simulate(desc: &NetworkDescription, cfg: &RunConfig, seed: u64) -> Result<SimReport, FrontError> {
    cfg.validate()?;
    let net = desc.network();
    let mode = cfg.mode;
    let batch = batch_size(desc, cfg, mode);
    let source = match cfg.density {
        DensitySetting::Assumed(d) => DensitySource::Assumed(d),
        DensitySetting::Measured => {
            if mode == Mode::Training && net.loss_kind().is_none() {
                return Err(FrontError::Config("measured training densities need a loss layer".into()));
            }
            let state = initial_state(desc, cfg, seed)?;
            let data = dataset_for(&net, batch, seed)?;
            DensitySource::Measured(measure(&net, &state, &data, batch, mode)?)
        }
    };
    Ok(simulate_network(&net, batch, &cfg.accelerator(), &cfg.memory, mode, &source)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub network: String,
    pub qformat: String,
    pub rounding: String,
    pub batch: usize,
    pub steps: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub test_accuracy: f64,
    pub test_samples: usize,
    pub saturation: Saturation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub summary: TrainSummary,
    pub state: TrainState,
}

/// Held-out accuracy and mean loss, evaluated in batches.
fn evaluate(net: &Network, state: &TrainState, data: &Dataset, batch: usize) -> Result<(f64, f64), FrontError> {
    let loss_kind = net.loss_kind();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk, state.fmt)?;
        let tr = forward(net, state, &x, Mode::Inference)?;
        let out = tr.output();
        correct += argmax_rows(out).iter().zip(&labels).filter(|(a, b)| a == b).count();
        if let Some(k) = loss_kind {
            let li = net.layers.len() - 1;
            let (v, _) = loss(out, &Target::Classes(labels), k, &state.ctx(li), &mut OpStats::default())?;
            loss_sum += v * chunk.len() as f64;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// SGD on the synthetic task. Each epoch visits the training split in a
/// seeded shuffle, dropping the final partial batch.
pub fn train(desc: &NetworkDescription, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome, FrontError> {
    cfg.validate()?;
    let net = desc.network();
    if net.loss_kind().is_none() {
        return Err(FrontError::Network { layer: None, field: Some("layers".into()), message: "training needs a loss layer as the last layer".into() });
    }
    let batch = batch_size(desc, cfg, Mode::Training);
    let (train_set, test_set) = dataset_for(&net, cfg.samples, seed)?.split_tail(cfg.test_samples);
    let per_epoch = train_set.len() / batch;
    if per_epoch == 0 {
        return Err(FrontError::Config(format!("batch {batch} exceeds the {} training samples", train_set.len())));
    }
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    let mut state = initial_state(desc, cfg, seed)?;
    let mut curve = Vec::with_capacity(total);
    let mut saturation = Saturation::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch = 0;
    for s in 0..total {
        let pos = s % per_epoch;
        if pos == 0 {
            epoch = s / per_epoch;
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
        }
        let (x, labels) = train_set.batch(&order[pos * batch..(pos + 1) * batch], state.fmt)?;
        let rep = train_step(&net, &mut state, &x, &Target::Classes(labels))?;
        for l in &rep.layers {
            saturation.merge(l.forward.saturation);
            saturation.merge(l.backward.saturation);
        }
        curve.push(CurvePoint {
            step: rep.step,
            epoch,
            loss: rep.loss,
            batch_accuracy: rep.correct as f64 / rep.batch as f64,
        });
    }
    let (test_accuracy, _) = evaluate(&net, &state, &test_set, batch)?;
    let summary = TrainSummary {
        network: net.name.clone(),
        qformat: state.fmt.to_string(),
        rounding: format!("{:?}", state.rounding).to_lowercase(),
        batch,
        steps: total as u64,
        epochs: total.div_ceil(per_epoch),
        final_loss: curve.last().map(|c| c.loss).unwrap_or(f64::NAN),
        test_accuracy,
        test_samples: test_set.len(),
        saturation,
    };
    Ok(TrainOutcome { curve, summary, state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub network: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy on the held-out tail of the synthetic task (the same samples
/// `train` reports on).
pub fn infer(desc: &NetworkDescription, cfg: &RunConfig, seed: u64) -> Result<InferSummary, FrontError> {
    cfg.validate()?;
    let net = desc.network();
    let (_, test_set) = dataset_for(&net, cfg.samples, seed)?.split_tail(cfg.test_samples);
    let state = initial_state(desc, cfg, seed)?;
    let (accuracy, mean_loss) = evaluate(&net, &state, &test_set, batch_size(desc, cfg, Mode::Inference))?;
    Ok(InferSummary { network: net.name.clone(), samples: test_set.len(), accuracy, mean_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub input_density: f64,
    pub output_density: f64,
    pub weight_density: Option<f64>,
    pub dense_macs: u64,
    pub aligned_macs: u64,
}

/// Measured per-layer densities over one inference batch.
pub fn sparsity(desc: &NetworkDescription, cfg: &RunConfig, seed: u64) -> Result<Vec<SparsityRow>, FrontError> {
    cfg.validate()?;
    let net = desc.network();
    let batch = batch_size(desc, cfg, Mode::Inference);
    let state = initial_state(desc, cfg, seed)?;
    let data = dataset_for(&net, batch, seed)?;
    let stats = measure(&net, &state, &data, batch, Mode::Inference)?;
    Ok(stats
        .into_iter()
        .map(|s| SparsityRow {
            index: s.index,
            name: s.name,
            kind: s.kind,
            input_density: s.input_density,
            output_density: s.output_density,
            weight_density: s.weight_density,
            dense_macs: s.forward.dense_macs,
            aligned_macs: s.forward.aligned_macs,
        })
        .collect())
}

//! Checkpoints: a `manifest.json` plus one serialized masked tensor per
//! parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FrontError;
use crate::fixedpoint::{QFormat, Rounding};
use crate::nn::{init_state, LayerParams, Network, TrainState};
use crate::sparse::MaskedTensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub role: String,
    pub file: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub index: usize,
    pub name: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub network: String,
    pub qformat: QFormat,
    pub rounding: Rounding,
    pub lr: f64,
    pub seed: u64,
    pub step: u64,
    pub layers: Vec<LayerEntry>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> FrontError {
    FrontError::Runtime(format!("checkpoint {}: {}", path.display(), message.into()))
}

pub fn save_checkpoint(dir: &Path, net: &Network, state: &TrainState) -> Result<CheckpointManifest, FrontError> {
    std::fs::create_dir_all(dir).map_err(|e| FrontError::io(dir, e))?;
    let mut layers = Vec::new();
    for (i, p) in state.params.iter().enumerate() {
        let tensors = p.tensors();
        if tensors.is_empty() {
            continue;
        }
        let mut entries = Vec::new();
        for (role, t) in tensors {
            let file = format!("layer{i:02}_{role}.mt");
            let path = dir.join(&file);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| FrontError::io(&path, e))?);
            t.write_to(&mut w).map_err(|e| corrupt(&path, e.to_string()))?;
            entries.push(TensorEntry { role: role.into(), file, shape: t.shape().0 });
        }
        let (running_mean, running_var) = match p {
            LayerParams::BatchNorm(b) => (Some(b.running_mean.clone()), Some(b.running_var.clone())),
            _ => (None, None),
        };
        layers.push(LayerEntry {
            index: i,
            name: net.layers[i].display_name(i),
            tensors: entries,
            running_mean,
            running_var,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        network: net.name.clone(),
        qformat: state.fmt,
        rounding: state.rounding,
        lr: state.lr,
        seed: state.seed,
        step: state.step,
        layers,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| FrontError::io(&path, e))?;
    Ok(manifest)
}

/// Restores a training state for `net`; every tensor must match the shape
/// the network expects.
pub fn load_checkpoint(dir: &Path, net: &Network) -> Result<TrainState, FrontError> {
    let mpath = dir.join("manifest.json");
    let text = super::read_input(&mpath)?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| corrupt(&mpath, e.to_string()))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(corrupt(&mpath, format!("unsupported version {}", m.version)));
    }
    let mut state = init_state(net, m.qformat, m.rounding, m.lr, m.seed)?;
    state.step = m.step;
    let expected = state.params.iter().filter(|p| !p.tensors().is_empty()).count();
    if m.layers.len() != expected {
        return Err(corrupt(&mpath, format!("{} parameter layers, network has {expected}", m.layers.len())));
    }
    for entry in &m.layers {
        let slot = state
            .params
            .get_mut(entry.index)
            .ok_or_else(|| corrupt(&mpath, format!("layer {} out of range", entry.index)))?;
        let mut loaded = Vec::new();
        for t in &entry.tensors {
            let path = dir.join(&t.file);
            let f = File::open(&path).map_err(|e| FrontError::io(&path, e))?;
            let mt = MaskedTensor::read_from(&mut BufReader::new(f)).map_err(|e| corrupt(&path, e.to_string()))?;
            if mt.format() != m.qformat || mt.shape().0 != t.shape {
                return Err(corrupt(&path, "format or shape differs from the manifest"));
            }
            loaded.push((t.role.as_str(), mt));
        }
        let want: Vec<(&str, [usize; 4])> = slot.tensors().iter().map(|(r, t)| (*r, t.shape().0)).collect();
        let got: Vec<(&str, [usize; 4])> = loaded.iter().map(|(r, t)| (*r, t.shape().0)).collect();
        if want != got {
            return Err(corrupt(&mpath, format!("layer {}: expected tensors {want:?}, found {got:?}", entry.index)));
        }
        let mut it = loaded.into_iter().map(|(_, t)| t);
        match slot {
            LayerParams::Conv { weights } => *weights = it.next().expect("checked"),
            LayerParams::Fc { weights, bias } => {
                *weights = it.next().expect("checked");
                if let Some(b) = bias {
                    *b = it.next().expect("checked");
                }
            }
            LayerParams::BatchNorm(p) => {
                p.gamma = it.next().expect("checked");
                p.beta = it.next().expect("checked");
                let c = p.channels();
                match (&entry.running_mean, &entry.running_var) {
                    (Some(mean), Some(var)) if mean.len() == c && var.len() == c => {
                        p.running_mean = mean.clone();
                        p.running_var = var.clone();
                    }
                    _ => return Err(corrupt(&mpath, format!("layer {}: running statistics", entry.index))),
                }
            }
            LayerParams::None => {}
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerSpec, LossKind};

    fn net() -> Network {
        Network {
            name: "ck".into(),
            input: [2, 4, 4],
            layers: vec![
                LayerSpec::new(LayerKind::Conv { filters: 3, kernel: 3, stride: 1, pad: 1 }),
                LayerSpec::new(LayerKind::BatchNorm { momentum: 0.9 }),
                LayerSpec::new(LayerKind::Relu {}),
                LayerSpec::new(LayerKind::Fc { outputs: 2, bias: true }),
                LayerSpec::new(LayerKind::Loss { loss: LossKind::SoftmaxXent }),
            ],
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = std::env::temp_dir().join(format!("sparsim-ck-{}", std::process::id()));
        let n = net();
        let mut st = init_state(&n, QFormat::Q4_16, Rounding::Stochastic, 0.05, 99).unwrap();
        st.step = 12;
        if let LayerParams::BatchNorm(p) = &mut st.params[1] {
            p.running_mean = vec![0.5, -0.25, 1.0];
        }
        save_checkpoint(&dir, &n, &st).unwrap();
        let back = load_checkpoint(&dir, &n).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(back, st);
    }

    #[test]
    fn wrong_network_is_rejected() {
        let dir = std::env::temp_dir().join(format!("sparsim-ck2-{}", std::process::id()));
        let n = net();
        let st = init_state(&n, QFormat::Q4_16, Rounding::Stochastic, 0.05, 1).unwrap();
        save_checkpoint(&dir, &n, &st).unwrap();
        let mut other = n.clone();
        other.layers[0] = LayerSpec::new(LayerKind::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 });
        let r = load_checkpoint(&dir, &other);
        std::fs::remove_dir_all(&dir).ok();
        assert!(r.is_err());
    }
}

//! Network and run-configuration files, sub-command drivers and report
//! emission.

mod checkpoint;
mod commands;
mod config;
pub mod fixtures;
mod report;
pub mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use commands::{
    dataset_for, infer, measure, simulate, sparsity, train, CurvePoint, InferSummary, SparsityRow, TrainOutcome,
    TrainSummary,
};
pub use config::{DensitySetting, RunConfig};
pub use report::{curve_csv, report_csv, sparsity_csv, ReportRow};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::mem::MemError;
use crate::nn::{LayerSpec, Mode, Network, NnError};
use crate::perf::PerfError;

#[derive(Debug, Error)]
pub enum FrontError {
    #[error("{what}: line {line}, column {column}: {message}")]
    Syntax { what: String, line: usize, column: usize, message: String },
    #[error("{}", layer_message(.layer, .field, .message))]
    Network { layer: Option<usize>, field: Option<String>, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Missing { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(NnError),
    #[error(transparent)]
    Perf(PerfError),
    #[error("{0}")]
    Runtime(String),
}

fn layer_message(layer: &Option<usize>, field: &Option<String>, message: &str) -> String {
    match (layer, field) {
        (Some(l), Some(f)) => format!("layer {l}: field `{f}`: {message}"),
        (Some(l), None) => format!("layer {l}: {message}"),
        (None, Some(f)) => format!("field `{f}`: {message}"),
        (None, None) => message.to_string(),
    }
}

impl From<NnError> for FrontError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Shape { layer, field, message } => {
                FrontError::Network { layer: Some(layer), field: Some(field), message }
            }
            other => FrontError::Nn(other),
        }
    }
}

impl From<PerfError> for FrontError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Shape(n) => n.into(),
            PerfError::Config(m) => FrontError::Config(m),
            PerfError::Mem(MemError::Config(m)) => FrontError::Config(format!("memory: {m}")),
            PerfError::Density(m) => FrontError::Config(format!("density: {m}")),
            other => FrontError::Perf(other),
        }
    }
}

impl FrontError {
    /// 2 for invalid input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            FrontError::Syntax { .. }
            | FrontError::Network { .. }
            | FrontError::Config(_)
            | FrontError::Missing { .. } => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FrontError::Syntax { .. } => "syntax",
            FrontError::Network { .. } => "network",
            FrontError::Config(_) => "config",
            FrontError::Missing { .. } => "missing_file",
            FrontError::Io { .. } => "io",
            FrontError::Nn(_) => "numeric",
            FrontError::Perf(_) => "model",
            FrontError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable form: `{"error": {"kind", "message", "exit_code", ...}}`.
    pub fn to_json(&self) -> Value {
        let mut e = Map::new();
        e.insert("kind".into(), json!(self.kind()));
        e.insert("message".into(), json!(self.to_string()));
        e.insert("exit_code".into(), json!(self.exit_code()));
        match self {
            FrontError::Syntax { line, column, .. } => {
                e.insert("line".into(), json!(line));
                e.insert("column".into(), json!(column));
            }
            FrontError::Network { layer, field, .. } => {
                if let Some(l) = layer {
                    e.insert("layer".into(), json!(l));
                }
                if let Some(f) = field {
                    e.insert("field".into(), json!(f));
                }
            }
            FrontError::Missing { path, .. } | FrontError::Io { path, .. } => {
                e.insert("path".into(), json!(path.display().to_string()));
            }
            _ => {}
        }
        json!({ "error": e })
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FrontError::Io { path: path.to_path_buf(), source }
    }
}

/// A network file: the layer graph plus run defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Checkpoint directory, relative to the network file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Per-sample `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkDescription {
    pub fn network(&self) -> Network {
        Network { name: self.name.clone(), input: self.input, layers: self.layers.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network descriptions serialize")
    }

    /// Batch size for `mode`: the file's value, else 32 for training and
    /// 100 for inference.
    pub fn batch_for(&self, mode: Mode) -> usize {
        self.batch.unwrap_or(match mode {
            Mode::Training => 32,
            Mode::Inference => 100,
        })
    }
}

const TOP_FIELDS: [&str; 6] = ["name", "batch", "seed", "checkpoint", "input", "layers"];

pub(crate) fn syntax(what: &str, e: &serde_json::Error) -> FrontError {
    FrontError::Syntax { what: what.into(), line: e.line(), column: e.column(), message: e.to_string() }
}

/// Field named in a serde message such as "missing field `kernel`".
fn field_of(message: &str) -> Option<String> {
    if message.contains("unknown variant") || message.contains("missing field `kind`") {
        return Some("kind".into());
    }
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// Parses and validates a network description. Errors name the layer index
/// and field where possible.
pub fn parse_network(text: &str) -> Result<NetworkDescription, FrontError> {
    let value: Value = serde_json::from_str(text).map_err(|e| syntax("network", &e))?;
    let Value::Object(mut top) = value else {
        return Err(FrontError::Network { layer: None, field: None, message: "expected a JSON object".into() });
    };
    if let Some(k) = top.keys().find(|k| !TOP_FIELDS.contains(&k.as_str())) {
        return Err(FrontError::Network { layer: None, field: Some(k.clone()), message: "unknown field".into() });
    }
    let layers = match top.remove("layers") {
        Some(Value::Array(items)) => items,
        Some(_) => {
            return Err(FrontError::Network {
                layer: None,
                field: Some("layers".into()),
                message: "must be an array".into(),
            })
        }
        None => {
            return Err(FrontError::Network {
                layer: None,
                field: Some("layers".into()),
                message: "missing field".into(),
            })
        }
    };
    let mut specs = Vec::with_capacity(layers.len());
    for (i, item) in layers.into_iter().enumerate() {
        let spec: LayerSpec = serde_json::from_value(item).map_err(|e| {
            let message = e.to_string();
            FrontError::Network { layer: Some(i), field: field_of(&message), message }
        })?;
        specs.push(spec);
    }
    top.insert("layers".into(), Value::Array(vec![]));
    let mut desc: NetworkDescription = serde_json::from_value(Value::Object(top)).map_err(|e| {
        let message = e.to_string();
        FrontError::Network { layer: None, field: field_of(&message), message }
    })?;
    desc.layers = specs;
    if desc.batch == Some(0) {
        return Err(FrontError::Network { layer: None, field: Some("batch".into()), message: "must be positive".into() });
    }
    desc.network().validate()?;
    Ok(desc)
}

/// Reads, parses and validates a network file; a relative checkpoint path
/// is resolved against the file's directory and must exist.
pub fn load_network(path: &Path) -> Result<NetworkDescription, FrontError> {
    let text = read_input(path)?;
    let mut desc = parse_network(&text)?;
    if let Some(ck) = &desc.checkpoint {
        let resolved = if ck.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(ck)
        } else {
            ck.clone()
        };
        if !resolved.join("manifest.json").is_file() {
            return Err(FrontError::Missing { path: resolved, message: "checkpoint manifest not found".into() });
        }
        desc.checkpoint = Some(resolved);
    }
    Ok(desc)
}

pub(crate) fn read_input(path: &Path) -> Result<String, FrontError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FrontError::Missing { path: path.to_path_buf(), message: "not found".into() },
        _ => FrontError::io(path, e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_fc_network() {
        let d = parse_network(r#"{"name":"one","input":[1,1,4],"layers":[{"kind":"fc","outputs":2}]}"#).unwrap();
        assert_eq!(d.layers.len(), 1);
        assert_eq!(d.network().output_dims().unwrap(), [1, 1, 2]);
        assert_eq!(d.batch_for(Mode::Training), 32);
        assert_eq!(d.batch_for(Mode::Inference), 100);
    }

    #[test]
    fn oversized_kernel_names_the_layer() {
        let text = r#"{"name":"bad","input":[1,4,4],"layers":[
            {"kind":"relu"},
            {"kind":"conv","filters":2,"kernel":7,"pad":1}]}"#;
        match parse_network(text).unwrap_err() {
            FrontError::Network { layer: Some(1), field: Some(f), .. } => assert_eq!(f, "kernel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_field() {
        let e = parse_network(r#"{"name":"x","input":[1,2,2],"layers":[{"kind":"relu"},{"kind":"lstm"}]}"#)
            .unwrap_err();
        assert!(matches!(&e, FrontError::Network { layer: Some(1), field: Some(f), .. } if f == "kind"), "{e:?}");
        assert_eq!(e.exit_code(), 2);
        let e = parse_network(r#"{"name":"x","input":[1,2,2],"layers":[{"kind":"relu","size":3}]}"#).unwrap_err();
        assert!(matches!(&e, FrontError::Network { layer: Some(0), field: Some(f), .. } if f == "size"), "{e:?}");
        let e = parse_network(r#"{"name":"x","input":[1,2,2],"layers":[{"kind":"conv","filters":1}]}"#).unwrap_err();
        assert!(matches!(&e, FrontError::Network { layer: Some(0), field: Some(f), .. } if f == "kernel"), "{e:?}");
        let e = parse_network(r#"{"name":"x","inputs":[1,2,2],"layers":[]}"#).unwrap_err();
        assert!(matches!(&e, FrontError::Network { layer: None, field: Some(f), .. } if f == "inputs"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = parse_network("{\n  \"name\": }").unwrap_err();
        assert!(matches!(e, FrontError::Syntax { line: 2, .. }));
        let j = e.to_json();
        assert_eq!(j["error"]["kind"], "syntax");
        assert_eq!(j["error"]["exit_code"], 2);
    }

    #[test]
    fn fixtures_round_trip() {
        for (_, text) in fixtures::ALL {
            let d = parse_network(text).unwrap();
            assert_eq!(parse_network(&d.to_json()).unwrap(), d);
        }
    }
}

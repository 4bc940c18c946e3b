use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{syntax, FrontError};
use crate::fixedpoint::{QFormat, Rounding};
use crate::mem::MemoryConfig;
use crate::nn::Mode;
use crate::perf::AcceleratorConfig;

/// `"measured"` or an assumed density in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensitySetting {
    Assumed(f64),
    Measured,
}

impl Default for DensitySetting {
    fn default() -> Self {
        DensitySetting::Assumed(0.5)
    }
}

impl Serialize for DensitySetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DensitySetting::Assumed(d) => s.serialize_f64(*d),
            DensitySetting::Measured => s.serialize_str("measured"),
        }
    }
}

impl<'de> Deserialize<'de> for DensitySetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DensitySetting::Assumed(v)),
            Raw::Word(w) if w == "measured" => Ok(DensitySetting::Measured),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "density must be a number in [0, 1] or \"measured\", got \"{w}\""
            ))),
        }
    }
}

/// Everything a run needs besides the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub accelerator: AcceleratorConfig,
    pub memory: MemoryConfig,
    /// Overrides `accelerator.qformat` when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qformat: Option<QFormat>,
    pub rounding: Rounding,
    pub density: DensitySetting,
    pub mode: Mode,
    /// Overrides the network's batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Training steps; when absent, `epochs` passes over the training split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Synthetic dataset size, including the held-out tail.
    pub samples: usize,
    pub test_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            accelerator: AcceleratorConfig::default(),
            memory: MemoryConfig::default(),
            qformat: None,
            rounding: Rounding::Stochastic,
            density: DensitySetting::default(),
            mode: Mode::Inference,
            batch: None,
            steps: None,
            epochs: 5,
            lr: 0.01,
            samples: 2000,
            test_samples: 400,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, FrontError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| syntax("config", &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn qformat(&self) -> QFormat {
        self.qformat.unwrap_or(self.accelerator.qformat)
    }

    /// Accelerator settings with the effective numeric format.
    pub fn accelerator(&self) -> AcceleratorConfig {
        AcceleratorConfig { qformat: self.qformat(), ..self.accelerator }
    }

    pub fn validate(&self) -> Result<(), FrontError> {
        let bad = |m: &str| Err(FrontError::Config(m.to_string()));
        if let DensitySetting::Assumed(d) = self.density {
            if !(0.0..=1.0).contains(&d) {
                return bad("density must lie in [0, 1]");
            }
        }
        if self.batch == Some(0) {
            return bad("batch must be positive");
        }
        if self.steps == Some(0) || self.epochs == 0 {
            return bad("steps and epochs must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.test_samples == 0 || self.test_samples >= self.samples {
            return bad("test_samples must be positive and below samples");
        }
        self.accelerator().validate()?;
        self.memory.validate().map_err(|e| FrontError::Config(format!("memory: {e}")))?;
        Ok(())
    }
}

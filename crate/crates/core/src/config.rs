//! Run configuration: one JSON document with a block per pipeline stage.
//!
//! Each stage carries a hash over exactly the blocks it depends on, so an
//! artifact written by one configuration is refused by a run whose upstream
//! settings differ.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::degradations::DataConfig;
use crate::flow::{DeltaMode, FlowArch, SamplerConfig};
use crate::metrics::EnergyConfig;
use crate::perception::PerceptionConfig;
use crate::posterior::{PosteriorArch, TrainConfig};
use crate::{Error, Result};

/// Environment variable that replaces every seed in the `seeds` block.
pub const SEED_ENV: &str = "PVRF_SEED";

pub const PRESETS: [&str; 3] = ["default", "desk", "smoke"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorBlock {
    pub arch: PosteriorArch,
    pub train: TrainConfig,
}

impl Default for PosteriorBlock {
    fn default() -> Self {
        Self {
            arch: PosteriorArch::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowBlock {
    pub arch: FlowArch,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Replaces the perception-adaptive δ with one global value.
    pub delta_fixed: Option<f64>,
}

impl Default for FlowBlock {
    fn default() -> Self {
        Self {
            arch: FlowArch::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            delta_fixed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub energy: EnergyConfig,
    /// Images per forward pass when computing anchors and samples.
    pub chunk: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            energy: EnergyConfig::default(),
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub posterior: u64,
    pub flow: u64,
    pub sample: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            posterior: 0,
            flow: 0,
            sample: 0,
            eval: 0,
        }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            posterior: seed,
            flow: seed,
            sample: seed,
            eval: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub perception: PerceptionConfig,
    pub posterior: PosteriorBlock,
    pub flow: FlowBlock,
    pub eval: EvalBlock,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "default" => {}
            "desk" => {
                cfg.posterior.arch.channels = 16;
                cfg.posterior.train.epochs = 15;
                cfg.flow.arch.channels = 16;
                cfg.flow.train.epochs = 20;
                cfg.flow.train.lr_init = 1e-3;
            }
            "smoke" => {
                cfg.data.train_size = 8;
                cfg.data.val_size = 4;
                cfg.data.test_size = 4;
                cfg.posterior.arch.channels = 4;
                cfg.posterior.train.epochs = 1;
                cfg.posterior.train.batch_size = 4;
                cfg.flow.arch.channels = 4;
                cfg.flow.train.epochs = 1;
                cfg.flow.train.batch_size = 4;
                cfg.flow.sampler.steps = 4;
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. The path must name an existing leaf;
    /// `value` is parsed as JSON and falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for set in sets {
            let set = set.as_ref();
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{set}` is not of the form key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::invalid(format!("unknown config key `{path}`")))?;
            }
            if node.is_object() {
                return Err(Error::invalid(format!("`{path}` is a block, not a leaf")));
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every seed when `PVRF_SEED` is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{raw}` is not a u64")))?;
            self.seeds = Seeds::all(seed);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.perception.validate()?;
        self.posterior.train.validate()?;
        self.flow.train.validate()?;
        if self.posterior.arch.channels == 0 || self.flow.arch.channels == 0 {
            return Err(Error::invalid("network width must be positive"));
        }
        if self.posterior.arch.image_channels != self.data.synth.channels
            || self.flow.arch.image_channels != self.data.synth.channels
        {
            return Err(Error::invalid("image_channels must match data.synth.channels"));
        }
        if self.flow.sampler.steps == 0 {
            return Err(Error::invalid("flow.sampler.steps must be at least 1"));
        }
        if let Some(d) = self.flow.delta_fixed {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid("flow.delta_fixed must be finite and non-negative"));
            }
        }
        if self.eval.chunk == 0 {
            return Err(Error::invalid("eval.chunk must be positive"));
        }
        Ok(())
    }

    pub fn posterior_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.posterior,
            ..self.posterior.train
        }
    }

    pub fn flow_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.flow,
            ..self.flow.train
        }
    }

    pub fn delta_mode(&self) -> DeltaMode {
        match self.flow.delta_fixed {
            Some(d) => DeltaMode::Fixed(d),
            None => DeltaMode::Adaptive(self.perception),
        }
    }

    /// Whole resolved document.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn data_hash(&self) -> String {
        digest(&serde_json::json!({
            "data": self.data,
            "perception": self.perception,
            "seed": self.seeds.data,
        }))
    }

    pub fn posterior_hash(&self) -> String {
        digest(&serde_json::json!({
            "upstream": self.data_hash(),
            "posterior": self.posterior,
            "seed": self.seeds.posterior,
        }))
    }

    /// Covers the flow weights only; the sampler is recorded next to each output.
    pub fn flow_hash(&self) -> String {
        digest(&serde_json::json!({
            "upstream": self.posterior_hash(),
            "arch": self.flow.arch,
            "train": self.flow.train,
            "delta_fixed": self.flow.delta_fixed,
            "seed": self.seeds.flow,
        }))
    }
}

/// Hex SHA-256 of the compact JSON encoding.
pub fn digest(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn require_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        log::error!("{what} was produced by a different configuration");
        Err(Error::ConfigMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

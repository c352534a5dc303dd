//! Soft weather perception priors.
//!
//! A yes/no (or good/poor) logit pair is turned into a probability with a
//! tempered sigmoid. Five type probabilities form the type prior, which is
//! normalised toward the simplex; three attribute scores form the attribute
//! prior. Both feed the difficulty score that sets the source perturbation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of weather types.
pub const N_TYPES: usize = 5;
/// Number of low-level attributes.
pub const N_ATTRS: usize = 3;

pub const TYPE_NAMES: [&str; N_TYPES] = ["blur", "low-light", "snow", "rain", "haze"];
pub const ATTR_NAMES: [&str; N_ATTRS] = ["visibility", "contrast", "sharpness"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub temperature: f64,
    pub tau: f64,
    pub alpha: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            tau: 1e-8,
            alpha: 0.5,
            delta_min: 0.025,
            delta_max: 0.1,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.tau >= 0.0) {
            return Err(Error::invalid("temperature must be > 0 and tau >= 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.delta_min <= self.delta_max) || self.delta_min < 0.0 {
            return Err(Error::invalid("need alpha in [0,1] and 0 <= delta_min <= delta_max"));
        }
        Ok(())
    }
}

/// Logits of the positive (`yes`/`good`) and negative (`no`/`poor`) answers.
/// Serialised as `[positive, negative]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct LogitPair {
    pub positive: f64,
    pub negative: f64,
}

impl From<[f64; 2]> for LogitPair {
    fn from([positive, negative]: [f64; 2]) -> Self {
        Self { positive, negative }
    }
}

impl From<LogitPair> for [f64; 2] {
    fn from(p: LogitPair) -> Self {
        [p.positive, p.negative]
    }
}

impl LogitPair {
    pub fn new(positive: f64, negative: f64) -> Self {
        Self { positive, negative }
    }
}

/// `1 / (1 + exp((negative - positive) / temperature))`.
pub fn quantize_pair(pair: LogitPair, temperature: f64) -> Result<f64> {
    if !pair.positive.is_finite() || !pair.negative.is_finite() {
        return Err(Error::invalid(format!("non-finite logit pair {pair:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(1.0 / (1.0 + ((pair.negative - pair.positive) / temperature).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypePrior {
    pub probs: [f64; N_TYPES],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTypePrior {
    pub weights: [f64; N_TYPES],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrPrior {
    pub scores: [f64; N_ATTRS],
}

fn quantize_all<const K: usize>(pairs: &[LogitPair], temperature: f64, what: &str) -> Result<[f64; K]> {
    if pairs.len() != K {
        return Err(Error::invalid(format!(
            "expected {K} {what} logit pairs, got {}",
            pairs.len()
        )));
    }
    let mut out = [0.0; K];
    for (o, &p) in out.iter_mut().zip(pairs) {
        *o = quantize_pair(p, temperature)?;
    }
    Ok(out)
}

pub fn quantize_types(pairs: &[LogitPair], temperature: f64) -> Result<TypePrior> {
    Ok(TypePrior {
        probs: quantize_all::<N_TYPES>(pairs, temperature, "type")?,
    })
}

pub fn quantize_attr(pairs: &[LogitPair], temperature: f64) -> Result<AttrPrior> {
    Ok(AttrPrior {
        scores: quantize_all::<N_ATTRS>(pairs, temperature, "attribute")?,
    })
}

/// `probs / (sum(probs) + tau)`, order preserved.
pub fn normalize_simplex(prior: &TypePrior, tau: f64) -> NormalizedTypePrior {
    let s: f64 = prior.probs.iter().sum();
    let denom = s + tau;
    let mut weights = [0.0; N_TYPES];
    for (w, &p) in weights.iter_mut().zip(&prior.probs) {
        *w = p / denom;
    }
    NormalizedTypePrior { weights }
}

/// The conditioning signal: soft type prior, its normalised weights and the
/// attribute prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionBundle {
    pub type_prior: TypePrior,
    pub normalized_type: NormalizedTypePrior,
    pub attr_prior: AttrPrior,
}

impl PerceptionBundle {
    pub fn new(type_prior: TypePrior, attr_prior: AttrPrior, tau: f64) -> Self {
        Self {
            normalized_type: normalize_simplex(&type_prior, tau),
            type_prior,
            attr_prior,
        }
    }

    pub fn from_logits(type_pairs: &[LogitPair], attr_pairs: &[LogitPair], cfg: &PerceptionConfig) -> Result<Self> {
        let t = quantize_types(type_pairs, cfg.temperature)?;
        let a = quantize_attr(attr_pairs, cfg.temperature)?;
        Ok(Self::new(t, a, cfg.tau))
    }

    /// All-zero bundle; the "unconditioned" input of the ablations.
    pub fn zeroed() -> Self {
        Self::new(
            TypePrior { probs: [0.0; N_TYPES] },
            AttrPrior { scores: [0.0; N_ATTRS] },
            1e-8,
        )
    }

    /// The 8 conditioning scalars fed to networks: normalised type weights
    /// followed by the raw attribute scores.
    pub fn condition_vector(&self) -> [f64; N_TYPES + N_ATTRS] {
        let mut out = [0.0; N_TYPES + N_ATTRS];
        out[..N_TYPES].copy_from_slice(&self.normalized_type.weights);
        out[N_TYPES..].copy_from_slice(&self.attr_prior.scores);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyDescriptor {
    pub entropy_h: f64,
    pub severity_s: f64,
    pub difficulty_u: f64,
    pub delta: f64,
}

/// Normalised Shannon entropy `-Σ w ln w / ln N`, with `0·ln 0 = 0`.
pub fn normalized_entropy(weights: &[f64; N_TYPES]) -> f64 {
    let h: f64 = weights.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum();
    h / (N_TYPES as f64).ln()
}

/// Difficulty descriptors from normalised type weights and attribute scores.
pub fn difficulty_from_parts(
    weights: &[f64; N_TYPES],
    attrs: &[f64; N_ATTRS],
    cfg: &PerceptionConfig,
) -> DifficultyDescriptor {
    if weights.iter().all(|&w| w == 0.0) {
        log::warn!("all-zero type prior: entropy taken as 0");
    }
    let entropy_h = normalized_entropy(weights).clamp(0.0, 1.0);
    let severity_s = (1.0 - attrs.iter().sum::<f64>() / N_ATTRS as f64).clamp(0.0, 1.0);
    let difficulty_u = cfg.alpha * entropy_h + (1.0 - cfg.alpha) * severity_s;
    let delta = (cfg.delta_min + (cfg.delta_max - cfg.delta_min) * difficulty_u).clamp(cfg.delta_min, cfg.delta_max);
    DifficultyDescriptor {
        entropy_h,
        severity_s,
        difficulty_u,
        delta,
    }
}

pub fn difficulty(bundle: &PerceptionBundle, cfg: &PerceptionConfig) -> DifficultyDescriptor {
    difficulty_from_parts(&bundle.normalized_type.weights, &bundle.attr_prior.scores, cfg)
}

/// One line of a logit dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRecord {
    pub id: String,
    pub type_logits: Vec<LogitPair>,
    pub attr_logits: Vec<LogitPair>,
}

impl LogitRecord {
    pub fn bundle(&self, cfg: &PerceptionConfig) -> Result<PerceptionBundle> {
        PerceptionBundle::from_logits(&self.type_logits, &self.attr_logits, cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceivedRecord {
    pub id: String,
    pub bundle: PerceptionBundle,
}

/// Reads a JSON-lines logit dump and quantizes every record. Blank lines are
/// skipped.
pub fn ingest_logit_dump(path: impl AsRef<Path>, cfg: &PerceptionConfig) -> Result<Vec<PerceivedRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: LogitRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let bundle = rec.bundle(cfg).map_err(|e| parse_err(e.to_string()))?;
        out.push(PerceivedRecord { id: rec.id, bundle });
    }
    Ok(out)
}

pub fn write_logit_dump(path: impl AsRef<Path>, records: &[LogitRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

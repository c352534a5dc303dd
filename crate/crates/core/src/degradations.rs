//! Procedural clean images, synthetic weather corruptions and the mock
//! perception oracle.
//!
//! Corruptions are applied in the fixed order blur → low-light → snow → rain →
//! haze, each followed by a clamp to `[0, 1]`. Snow and rain masks are drawn
//! from a fixed random sequence and truncated by severity, so the mask at a
//! lower severity is always a subset of the mask at a higher one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::perception::{LogitPair, LogitRecord, PerceptionBundle, PerceptionConfig, N_TYPES};
use crate::rng::{self, Purpose, StreamRng};

pub const BLUR: usize = 0;
pub const LOW_LIGHT: usize = 1;
pub const SNOW: usize = 2;
pub const RAIN: usize = 3;
pub const HAZE: usize = 4;

/// Per-type severities in `[0, 1]`, ordered blur, low-light, snow, rain, haze.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub severities: [f64; N_TYPES],
}

impl DegradationSpec {
    pub fn new(severities: [f64; N_TYPES]) -> Result<Self> {
        if severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid(format!("severities must lie in [0,1]: {severities:?}")));
        }
        Ok(Self { severities })
    }

    pub fn clean() -> Self {
        Self {
            severities: [0.0; N_TYPES],
        }
    }

    pub fn single(kind: usize, severity: f64) -> Result<Self> {
        let mut s = [0.0; N_TYPES];
        *s.get_mut(kind)
            .ok_or_else(|| Error::invalid("unknown degradation type"))? = severity;
        Self::new(s)
    }

    pub fn active_count(&self) -> usize {
        self.severities.iter().filter(|&&s| s > 0.0).count()
    }
}

/// Constants of the synthetic corruptions and of the mock oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationParams {
    /// Gaussian blur sigma in pixels per unit severity.
    pub blur_sigma: f64,
    /// Low-light gain is `1 - lowlight_gain · s`.
    pub lowlight_gain: f64,
    /// Low-light gamma is `1 + lowlight_gamma · s`.
    pub lowlight_gamma: f64,
    /// Fraction of pixels turned into snow flakes at severity 1.
    pub snow_coverage: f64,
    /// Fraction of pixels covered by rain streaks at severity 1.
    pub rain_coverage: f64,
    pub rain_angle_deg: f64,
    pub rain_min_length: usize,
    pub rain_max_length: usize,
    /// Blend of a streak pixel toward white.
    pub rain_opacity: f64,
    /// Veil weight is `haze_weight · s`.
    pub haze_weight: f64,
    /// Contrast is scaled by `1 - haze_contrast · s` before the veil.
    pub haze_contrast: f64,
    pub haze_veil: f64,
    /// Oracle logit gap slope `g`.
    pub oracle_gain: f64,
    /// Oracle severity offset `s0`.
    pub oracle_offset: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: 2.0,
            lowlight_gain: 0.8,
            lowlight_gamma: 1.5,
            snow_coverage: 0.15,
            rain_coverage: 0.1,
            rain_angle_deg: 60.0,
            rain_min_length: 4,
            rain_max_length: 9,
            rain_opacity: 0.6,
            haze_weight: 0.7,
            haze_contrast: 0.5,
            haze_veil: 1.0,
            oracle_gain: 6.0,
            oracle_offset: 0.2,
        }
    }
}

/// Appearance of the procedural clean images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Amplitude range of the fine sinusoidal texture.
    pub texture_amplitude: (f64, f64),
    /// Standard deviation of per-pixel grain.
    pub grain_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            texture_amplitude: (0.02, 0.06),
            grain_std: 0.02,
        }
    }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::uniform(rng)
}

/// One procedural image: an oriented gradient, rectangles, smooth blobs, a
/// fine grating and grain.
pub fn synth_image(seed: u64, index: u64, p: &SynthParams) -> ImagePatch {
    let mut r = rng::stream(seed, Purpose::Data, index);
    let (h, w, ch) = (p.height, p.width, p.channels);
    let n = h * w;
    let mut img = ImagePatch::filled(h, w, ch, 0.0);
    let per_channel = |r: &mut StreamRng, lo: f64, hi: f64| -> Vec<f64> {
        let base = uniform(r, lo, hi);
        (0..ch)
            .map(|c| {
                if c == 0 {
                    base
                } else {
                    (base + uniform(r, -0.15, 0.15)).clamp(lo, hi)
                }
            })
            .collect()
    };
    let size = h.max(w) as f64;

    let theta = uniform(&mut r, 0.0, std::f64::consts::TAU);
    let base = per_channel(&mut r, 0.25, 0.65);
    let amp = uniform(&mut r, 0.1, 0.4);
    let (ct, st) = (theta.cos(), theta.sin());
    for c in 0..ch {
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let proj = (x as f64 * ct + y as f64 * st) / size;
                plane[y * w + x] = (base[c] + amp * (proj - 0.5 * (ct + st))) as f32;
            }
        }
    }

    let rects = r.random_range(2..=4);
    for _ in 0..rects {
        let rw = r.random_range(4..=w.clamp(5, 16));
        let rh = r.random_range(4..=h.clamp(5, 16));
        let x0 = r.random_range(0..w.saturating_sub(rw).max(1));
        let y0 = r.random_range(0..h.saturating_sub(rh).max(1));
        let val = per_channel(&mut r, 0.0, 1.0);
        let opacity = uniform(&mut r, 0.6, 1.0);
        for c in 0..ch {
            let plane = img.plane_mut(c);
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    let v = plane[y * w + x] as f64;
                    plane[y * w + x] = (v + opacity * (val[c] - v)) as f32;
                }
            }
        }
    }

    let blobs = r.random_range(1..=3);
    for _ in 0..blobs {
        let cx = uniform(&mut r, 0.0, w as f64);
        let cy = uniform(&mut r, 0.0, h as f64);
        let sigma = uniform(&mut r, 2.0, 6.0);
        let a = uniform(&mut r, -0.3, 0.3);
        for c in 0..ch {
            let plane = img.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    plane[y * w + x] += (a * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
        }
    }

    let tex_amp = uniform(&mut r, p.texture_amplitude.0, p.texture_amplitude.1);
    let period = uniform(&mut r, 3.0, 6.0);
    let phi = uniform(&mut r, 0.0, std::f64::consts::TAU);
    let psi = uniform(&mut r, 0.0, std::f64::consts::TAU);
    let (cp, sp) = (psi.cos(), psi.sin());
    for c in 0..ch {
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 * cp + y as f64 * sp) * std::f64::consts::TAU / period + phi;
                plane[y * w + x] += (tex_amp * u.sin()) as f32;
            }
        }
    }

    if p.grain_std > 0.0 {
        for i in 0..n * ch {
            img.pixels[i] += (p.grain_std * rng::normal(&mut r)) as f32;
        }
    }
    img.clamped()
}

/// `count` procedural images; image `i` depends only on `(seed, i)`.
pub fn synth_clean(seed: u64, count: usize, p: &SynthParams) -> Result<Vec<ImagePatch>> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    Ok((0..count as u64).map(|i| synth_image(seed, i, p)).collect())
}

fn gaussian_blur(img: &mut ImagePatch, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let clampi = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    for c in 0..img.channels {
        let src: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        let mut tmp = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * src[y as usize * w as usize + clampi(x + k as isize - radius, w)];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[clampi(y + k as isize - radius, h) * w as usize + x as usize];
                }
                plane[(y * w + x) as usize] = acc as f32;
            }
        }
    }
}

fn low_light(img: &mut ImagePatch, s: f64, p: &DegradationParams) {
    let gain = 1.0 - p.lowlight_gain * s;
    let gamma = 1.0 + p.lowlight_gamma * s;
    img.pixels
        .iter_mut()
        .for_each(|v| *v = (gain * (*v as f64).max(0.0).powf(gamma)) as f32);
}

fn snow(img: &mut ImagePatch, s: f64, p: &DegradationParams, seed: u64) {
    let n = img.height * img.width;
    let count = ((p.snow_coverage * s * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Degrade, SNOW as u64));
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for &i in &order[..count] {
            plane[i] = 1.0;
        }
    }
}

fn rain(img: &mut ImagePatch, s: f64, p: &DegradationParams, seed: u64) {
    let (h, w) = (img.height, img.width);
    let n = h * w;
    let target = ((p.rain_coverage * s * n as f64).round() as usize).min(n);
    if target == 0 {
        return;
    }
    let mut r = rng::stream(seed, Purpose::Degrade, RAIN as u64);
    let (dx, dy) = (p.rain_angle_deg.to_radians().cos(), p.rain_angle_deg.to_radians().sin());
    let mut mask = vec![false; n];
    let mut covered = 0;
    // Bounded in case the streak geometry can never reach the target.
    for _ in 0..64 * n {
        if covered >= target {
            break;
        }
        let x0 = uniform(&mut r, 0.0, w as f64);
        let y0 = uniform(&mut r, 0.0, h as f64);
        let len = r.random_range(p.rain_min_length..=p.rain_max_length.max(p.rain_min_length));
        for k in 0..len {
            let x = (x0 + k as f64 * dx).floor();
            let y = (y0 + k as f64 * dy).floor();
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            let i = y as usize * w + x as usize;
            if !mask[i] {
                mask[i] = true;
                covered += 1;
            }
        }
    }
    let a = p.rain_opacity as f32;
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for (v, &m) in plane.iter_mut().zip(&mask) {
            if m {
                *v += a * (1.0 - *v);
            }
        }
    }
}

fn haze(img: &mut ImagePatch, s: f64, p: &DegradationParams) {
    let weight = p.haze_weight * s;
    let contrast = 1.0 - p.haze_contrast * s;
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
        for v in plane.iter_mut() {
            let reduced = m + contrast * (*v as f64 - m);
            *v = ((1.0 - weight) * reduced + weight * p.haze_veil) as f32;
        }
    }
}

/// Applies `spec` in canonical order; zero severities are skipped exactly.
pub fn degrade(x: &ImagePatch, spec: &DegradationSpec, seed: u64, p: &DegradationParams) -> ImagePatch {
    let mut img = x.clone();
    let s = &spec.severities;
    if s[BLUR] > 0.0 {
        gaussian_blur(&mut img, p.blur_sigma * s[BLUR]);
        img.clamp();
    }
    if s[LOW_LIGHT] > 0.0 {
        low_light(&mut img, s[LOW_LIGHT], p);
        img.clamp();
    }
    if s[SNOW] > 0.0 {
        snow(&mut img, s[SNOW], p, seed);
        img.clamp();
    }
    if s[RAIN] > 0.0 {
        rain(&mut img, s[RAIN], p, seed);
        img.clamp();
    }
    if s[HAZE] > 0.0 {
        haze(&mut img, s[HAZE], p);
        img.clamp();
    }
    img
}

/// Logits a perfectly calibrated (up to Gaussian noise) perception model
/// would emit for `spec`. Gaps are placed on the positive logit; the
/// negative logit is 0.
pub fn mock_oracle(
    id: &str,
    spec: &DegradationSpec,
    noise_std: f64,
    seed: u64,
    p: &DegradationParams,
) -> Result<LogitRecord> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let mut r = rng::stream(seed, Purpose::Oracle, 0);
    let s = &spec.severities;
    let g = p.oracle_gain;
    let type_logits = s
        .iter()
        .map(|&si| {
            let eta = if noise_std > 0.0 {
                noise_std * rng::normal(&mut r)
            } else {
                0.0
            };
            LogitPair::new(g * (si - p.oracle_offset) + eta, 0.0)
        })
        .collect();
    let dark = s[HAZE].max(s[LOW_LIGHT]);
    let attr_logits = vec![
        LogitPair::new(g * (0.5 - dark - 0.5 * s[SNOW]), 0.0),
        LogitPair::new(g * (0.5 - dark), 0.0),
        LogitPair::new(g * (0.5 - s[BLUR]), 0.0),
    ];
    Ok(LogitRecord {
        id: id.to_string(),
        type_logits,
        attr_logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthParams,
    pub degradation: DegradationParams,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Probability that a sample combines 2–3 degradation types.
    pub mix_ratio: f64,
    pub oracle_noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams::default(),
            degradation: DegradationParams::default(),
            train_size: 2000,
            val_size: 200,
            test_size: 200,
            severity_min: 0.3,
            severity_max: 1.0,
            mix_ratio: 0.5,
            oracle_noise_std: 0.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        if !(self.severity_min > 0.0 && self.severity_min <= self.severity_max && self.severity_max <= 1.0) {
            return Err(Error::invalid("need 0 < severity_min <= severity_max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::invalid("mix_ratio must lie in [0,1]"));
        }
        if self.synth.height < 8 || self.synth.width < 8 || !(self.synth.channels == 1 || self.synth.channels == 3) {
            return Err(Error::invalid("images must be at least 8x8 with 1 or 3 channels"));
        }
        if self.synth.height % 4 != 0 || self.synth.width % 4 != 0 {
            return Err(Error::invalid("image extents must be multiples of 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub clean: String,
    pub degraded: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub spec: DegradationSpec,
    /// Seeds the clean image, the degradation masks and the oracle noise.
    pub sample_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<SampleFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: DataConfig,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub clean: ImagePatch,
    pub degraded: ImagePatch,
    pub spec: DegradationSpec,
    pub logits: LogitRecord,
    pub bundle: PerceptionBundle,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn plan_sample(cfg: &DataConfig, seed: u64, split: Split, index: usize) -> SampleRecord {
    let key = (split.tag() << 32) | index as u64;
    let mut r = rng::stream(seed, Purpose::Split, key);
    let combined = rng::uniform(&mut r) < cfg.mix_ratio;
    let active = if combined { r.random_range(2..=3) } else { 1 };
    let mut kinds: Vec<usize> = (0..N_TYPES).collect();
    kinds.shuffle(&mut r);
    let mut severities = [0.0; N_TYPES];
    for &k in &kinds[..active] {
        severities[k] = uniform(&mut r, cfg.severity_min, cfg.severity_max);
    }
    SampleRecord {
        id: format!("{}-{:05}", split.name(), index),
        split,
        spec: DegradationSpec { severities },
        sample_seed: rng::mix64(seed, key),
        files: None,
    }
}

/// Materialises one manifest record.
pub fn realize(rec: &SampleRecord, cfg: &DataConfig, perception: &PerceptionConfig) -> Result<PairedSample> {
    let clean = synth_image(rec.sample_seed, 0, &cfg.synth);
    let degraded = degrade(&clean, &rec.spec, rec.sample_seed, &cfg.degradation);
    let logits = mock_oracle(
        &rec.id,
        &rec.spec,
        cfg.oracle_noise_std,
        rec.sample_seed,
        &cfg.degradation,
    )?;
    let bundle = logits.bundle(perception)?;
    Ok(PairedSample {
        id: rec.id.clone(),
        clean,
        degraded,
        spec: rec.spec,
        logits,
        bundle,
    })
}

pub fn build_dataset(cfg: &DataConfig, seed: u64, perception: &PerceptionConfig, config_hash: &str) -> Result<Dataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.train_size + cfg.val_size + cfg.test_size);
    for (split, size) in Split::ALL
        .into_iter()
        .zip([cfg.train_size, cfg.val_size, cfg.test_size])
    {
        samples.extend((0..size).map(|i| plan_sample(cfg, seed, split, i)));
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        seed,
        config: cfg.clone(),
        samples,
    };
    rebuild(&manifest, perception)
}

/// Regenerates every sample of `manifest`; pixel data is bit-identical to the
/// original build.
pub fn rebuild(manifest: &Manifest, perception: &PerceptionConfig) -> Result<Dataset> {
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        manifest: manifest.clone(),
    };
    for rec in &manifest.samples {
        let s = realize(rec, &manifest.config, perception)?;
        match rec.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::quantize_pair;

    fn params() -> DegradationParams {
        DegradationParams::default()
    }

    #[test]
    fn synth_is_deterministic_bounded_and_structured() {
        let p = SynthParams::default();
        let a = synth_clean(11, 3, &p).unwrap();
        assert_eq!(a, synth_clean(11, 3, &p).unwrap());
        assert!(synth_clean(11, 0, &p).is_err());
        for seed in 0..100 {
            let img = synth_image(seed, 0, &p);
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.variance() > 1e-3, "seed {seed} variance {}", img.variance());
        }
    }

    #[test]
    fn zero_severity_is_identity() {
        let x = synth_image(3, 0, &SynthParams::default());
        assert_eq!(degrade(&x, &DegradationSpec::clean(), 9, &params()), x);
    }

    #[test]
    fn full_haze_on_black_is_bright() {
        let x = ImagePatch::filled(32, 32, 1, 0.0);
        let y = degrade(&x, &DegradationSpec::single(HAZE, 1.0).unwrap(), 0, &params());
        assert!(y.pixels.iter().all(|&v| v >= 0.6));
    }

    #[test]
    fn low_light_darkens() {
        for seed in 0..50 {
            let x = synth_image(seed, 0, &SynthParams::default());
            let y = degrade(&x, &DegradationSpec::single(LOW_LIGHT, 1.0).unwrap(), seed, &params());
            assert!(y.mean() < x.mean());
        }
    }

    #[test]
    fn masks_nest_and_cover_requested_fraction() {
        let x = ImagePatch::filled(32, 32, 1, 0.0);
        let lo = degrade(&x, &DegradationSpec::single(SNOW, 0.4).unwrap(), 5, &params());
        let hi = degrade(&x, &DegradationSpec::single(SNOW, 0.8).unwrap(), 5, &params());
        let count = |img: &ImagePatch| img.pixels.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(count(&hi), (0.15f64 * 0.8 * 1024.0).round() as usize);
        assert!(lo.pixels.iter().zip(&hi.pixels).all(|(&a, &b)| a <= b));

        let lo = degrade(&x, &DegradationSpec::single(RAIN, 0.5).unwrap(), 5, &params());
        let hi = degrade(&x, &DegradationSpec::single(RAIN, 1.0).unwrap(), 5, &params());
        assert!(count(&hi) >= 102);
        assert!(lo.pixels.iter().zip(&hi.pixels).all(|(&a, &b)| a <= b));
    }

    #[test]
    fn oracle_examples() {
        let q = |spec: DegradationSpec| {
            let rec = mock_oracle("x", &spec, 0.0, 1, &params()).unwrap();
            rec.type_logits
                .iter()
                .map(|&p| quantize_pair(p, 3.0).unwrap())
                .collect::<Vec<_>>()
        };
        let p = q(DegradationSpec::single(SNOW, 0.2).unwrap());
        assert!((p[SNOW] - 0.5).abs() < 1e-12);
        let p = q(DegradationSpec::single(RAIN, 0.7).unwrap());
        assert!((p[RAIN] - 0.7310586).abs() < 1e-7);
        let p = q(DegradationSpec::clean());
        assert!(p.iter().all(|&v| (v - 0.4013).abs() < 1e-4));
    }

    #[test]
    fn oracle_ranks_active_type_first() {
        for kind in 0..N_TYPES {
            for &s in &[0.5, 0.75, 1.0] {
                let rec = mock_oracle("x", &DegradationSpec::single(kind, s).unwrap(), 0.0, 0, &params()).unwrap();
                let b = rec.bundle(&PerceptionConfig::default()).unwrap();
                for other in (0..N_TYPES).filter(|&o| o != kind) {
                    assert!(b.type_prior.probs[kind] > b.type_prior.probs[other]);
                }
            }
        }
    }

    fn small_cfg(mix: f64) -> DataConfig {
        DataConfig {
            train_size: 20,
            val_size: 6,
            test_size: 6,
            mix_ratio: mix,
            ..DataConfig::default()
        }
    }

    #[test]
    fn mix_ratio_controls_active_counts() {
        let pc = PerceptionConfig::default();
        let single = build_dataset(&small_cfg(0.0), 4, &pc, "h").unwrap();
        assert!(single.manifest.samples.iter().all(|s| s.spec.active_count() == 1));
        let mixed = build_dataset(&small_cfg(1.0), 4, &pc, "h").unwrap();
        assert!(mixed
            .manifest
            .samples
            .iter()
            .all(|s| (2..=3).contains(&s.spec.active_count())));
    }

    #[test]
    fn manifest_rebuild_is_bit_identical_and_splits_disjoint() {
        let pc = PerceptionConfig::default();
        let ds = build_dataset(&small_cfg(0.5), 8, &pc, "h").unwrap();
        let json = serde_json::to_string(&ds.manifest).unwrap();
        let back: Manifest = serde_json::from_str(&json).unwrap();
        let again = rebuild(&back, &pc).unwrap();
        for split in Split::ALL {
            for (a, b) in ds.split(split).iter().zip(again.split(split)) {
                let bits = |img: &ImagePatch| img.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.clean), bits(&b.clean));
                assert_eq!(bits(&a.degraded), bits(&b.degraded));
                assert_eq!(a.bundle, b.bundle);
            }
        }
        let mut seeds: Vec<u64> = ds.manifest.samples.iter().map(|s| s.sample_seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), ds.manifest.samples.len());
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = DataConfig {
            val_size: 0,
            ..DataConfig::default()
        };
        assert!(build_dataset(&cfg, 0, &PerceptionConfig::default(), "h").is_err());
    }
}

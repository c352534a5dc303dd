//! Stage-1 restoration network producing the anchor `μ = Ψ(Y, c)`.
//!
//! Two-level residual encoder–decoder. One AMN modulates the entry features
//! and the bottleneck input, one WWA refines the bottleneck, and a zero
//! initialised head adds a correction to the degraded input.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AmnLayer, WwaLayer};
use crate::degradations::PairedSample;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::numcore::nn::{Conv2d, Init};
use crate::numcore::{Adam, AdamConfig, Checkpoint, CosineSchedule, ParamStore, Real, Tape, Tensor, Var};
use crate::perception::{PerceptionBundle, N_ATTRS, N_TYPES};
use crate::rng::{self, Purpose};

pub const CHECKPOINT_KIND: &str = "posterior";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorArch {
    pub channels: usize,
    pub image_channels: usize,
    /// When false every bundle is replaced by the zero bundle.
    pub conditioned: bool,
}

impl Default for PosteriorArch {
    fn default() -> Self {
        Self {
            channels: 32,
            image_channels: 1,
            conditioned: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square random crop applied to training pairs; `None` trains on whole images.
    pub crop: Option<usize>,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Set from the run's `seeds` block rather than read from this block.
    #[serde(skip)]
    pub seed: u64,
    pub loss: LossKind,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            crop: None,
            lr_init: 2e-4,
            lr_final: 6.25e-6,
            seed: 0,
            loss: LossKind::Mse,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr_final <= self.lr_init && self.lr_final >= 0.0) {
            return Err(Error::invalid("need 0 <= lr_final <= lr_init"));
        }
        if let Some(c) = self.crop {
            if c == 0 || c % 4 != 0 {
                return Err(Error::invalid("crop must be a positive multiple of 4"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, train_len: usize) -> CosineSchedule {
        CosineSchedule {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            total_steps: self.epochs * train_len.div_ceil(self.batch_size),
        }
    }

    /// Mini-batches of one epoch, shuffled from the `Shuffle` stream.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.seed, Purpose::Shuffle, epoch as u64));
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// `[B, C, H, W]` tensor from equally shaped images.
pub fn stack_images<T: Real>(images: &[&ImagePatch]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let [c, h, w] = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("stack_images", &img.shape(), &first.shape()));
        }
        data.extend(img.pixels.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

pub fn unstack_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ImagePatch>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape("unstack_images", s, &[4]));
    }
    t.data()
        .chunks(s[1] * s[2] * s[3])
        .map(|chunk| ImagePatch::new(s[2], s[3], s[1], chunk.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

/// `[B, M]` attribute tensor.
pub fn attr_tensor<T: Real>(bundles: &[&PerceptionBundle]) -> Tensor<T> {
    let data: Vec<f64> = bundles.iter().flat_map(|b| b.attr_prior.scores).collect();
    Tensor::from_f64(&[bundles.len(), N_ATTRS], &data).expect("attr shape")
}

/// Layer handles; the weights live in whichever [`ParamStore`] built them.
#[derive(Debug, Clone)]
pub struct PosteriorNet {
    pub arch: PosteriorArch,
    conv_in: Conv2d,
    amn: AmnLayer,
    enc1: Conv2d,
    enc2: Conv2d,
    wwa: WwaLayer,
    dec2: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

impl PosteriorNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, arch: PosteriorArch, seed: u64) -> Result<Self> {
        let (c, ic) = (arch.channels, arch.image_channels);
        if c == 0 || !(ic == 1 || ic == 3) {
            return Err(Error::invalid("posterior needs channels > 0 and 1 or 3 image channels"));
        }
        let he = Init::He { gain: 1.0 };
        Ok(Self {
            arch,
            conv_in: Conv2d::new(store, "conv_in", ic, c, he, seed)?,
            amn: AmnLayer::new(store, "amn", c, seed)?,
            enc1: Conv2d::new(store, "enc1", c, c, he, seed)?,
            enc2: Conv2d::new(store, "enc2", c, c, he, seed)?,
            wwa: WwaLayer::new(store, "wwa", c, Init::He { gain: 0.5 }, seed)?,
            dec2: Conv2d::new(store, "dec2", c, c, he, seed)?,
            dec1: Conv2d::new(store, "dec1", c, c, he, seed)?,
            head: Conv2d::new(store, "head", c, ic, Init::Zeros, seed)?,
        })
    }

    /// `μ` for a batch `y: [B, C_img, H, W]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        bundles: &[&PerceptionBundle],
    ) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 4 || s[1] != self.arch.image_channels || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::shape("posterior input", &s, &[self.arch.image_channels]));
        }
        if bundles.len() != s[0] {
            return Err(Error::shape("posterior bundles", &[bundles.len()], &[s[0]]));
        }
        let zero = PerceptionBundle::zeroed();
        let bundles: Vec<&PerceptionBundle> = if self.arch.conditioned {
            bundles.to_vec()
        } else {
            vec![&zero; bundles.len()]
        };
        let attrs = tape.constant(attr_tensor(&bundles));
        let weights: Vec<[f64; N_TYPES]> = bundles.iter().map(|b| b.normalized_type.weights).collect();

        let f = self.conv_in.forward(tape, store, y)?;
        let f = tape.silu(f);
        let f = self.amn.modulate(tape, store, f, attrs, 0)?;
        let x1 = self.enc1.forward(tape, store, f)?;
        let x1 = tape.silu(x1);
        let p1 = tape.avg_pool2(x1)?;
        let x2 = self.enc2.forward(tape, store, p1)?;
        let x2 = tape.silu(x2);
        let f_mid = tape.avg_pool2(x2)?;
        let b = self.amn.modulate(tape, store, f_mid, attrs, 1)?;
        let adapted = self.wwa.forward(tape, store, b, &weights)?;
        let b = tape.add(b, adapted)?;
        let u2 = tape.upsample2(b)?;
        let u2 = tape.add(u2, x2)?;
        let d2 = self.dec2.forward(tape, store, u2)?;
        let d2 = tape.silu(d2);
        let u1 = tape.upsample2(d2)?;
        let u1 = tape.add(u1, x1)?;
        let d1 = self.dec1.forward(tape, store, u1)?;
        let d1 = tape.silu(d1);
        let correction = self.head.forward(tape, store, d1)?;
        tape.add(y, correction)
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub net: PosteriorNet,
    pub store: ParamStore<f32>,
}

impl PosteriorModel {
    pub fn new(arch: PosteriorArch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = PosteriorNet::new(&mut store, arch, seed)?;
        Ok(Self { net, store })
    }

    pub fn arch(&self) -> PosteriorArch {
        self.net.arch
    }

    /// Raw anchors (not clamped) for a batch.
    pub fn predict_batch(&self, ys: &[&ImagePatch], bundles: &[&PerceptionBundle]) -> Result<Vec<ImagePatch>> {
        let mut tape = Tape::<f32>::no_grad();
        let y = tape.constant(stack_images(ys)?);
        let mu = self.net.forward(&mut tape, &self.store, y, bundles)?;
        unstack_images(tape.value(mu))
    }

    pub fn predict(&self, y: &ImagePatch, bundle: &PerceptionBundle) -> Result<ImagePatch> {
        Ok(self.predict_batch(&[y], &[bundle])?.remove(0))
    }

    /// Anchors for many images, evaluated in chunks of `chunk`.
    pub fn predict_all(
        &self,
        ys: &[&ImagePatch],
        bundles: &[&PerceptionBundle],
        chunk: usize,
    ) -> Result<Vec<ImagePatch>> {
        let mut out = Vec::with_capacity(ys.len());
        for (yc, bc) in ys.chunks(chunk.max(1)).zip(bundles.chunks(chunk.max(1))) {
            out.extend(self.predict_batch(yc, bc)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let model = serde_json::to_value(self.net.arch).expect("arch serializes");
        Checkpoint::new(CHECKPOINT_KIND, config_hash, model, self.store.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, got {}",
                ckpt.meta.kind
            )));
        }
        let arch: PosteriorArch = serde_json::from_value(ckpt.meta.model.clone())?;
        let mut model = Self::new(arch, 0)?;
        model.store.load_from(&ckpt.params)?;
        Ok(model)
    }
}

/// One (degraded, clean, condition) training example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub degraded: &'a ImagePatch,
    pub clean: &'a ImagePatch,
    pub bundle: &'a PerceptionBundle,
}

impl<'a> From<&'a PairedSample> for Example<'a> {
    fn from(s: &'a PairedSample) -> Self {
        Self {
            degraded: &s.degraded,
            clean: &s.clean,
            bundle: &s.bundle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
}

/// Per-epoch losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    /// `epoch,split,loss,psnr` with `psnr = 10·log10(1 / loss)`.
    pub fn to_csv_with_psnr(&self) -> String {
        let mut out = String::from("epoch,split,loss,psnr\n");
        for r in &self.rows {
            let psnr = crate::metrics::psnr_from_mse(r.loss);
            out.push_str(&format!(
                "{},{},{:.9e},{}\n",
                r.epoch,
                r.split,
                r.loss,
                crate::metrics::format_psnr(psnr)
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.9e}\n", r.epoch, r.split, r.loss));
        }
        out
    }
}

fn crop_pair(
    cfg: &TrainConfig,
    y: &ImagePatch,
    x: &ImagePatch,
    epoch: usize,
    index: usize,
) -> (ImagePatch, ImagePatch) {
    let Some(c) = cfg.crop.filter(|&c| c < y.height || c < y.width) else {
        return (y.clone(), x.clone());
    };
    let (ch, cw) = (c.min(y.height), c.min(y.width));
    let mut r = rng::stream(cfg.seed, Purpose::Shuffle, rng::mix64(epoch as u64, index as u64 + 1));
    let oy = rand::Rng::random_range(&mut r, 0..=y.height - ch);
    let ox = rand::Rng::random_range(&mut r, 0..=y.width - cw);
    let cut = |img: &ImagePatch| {
        let mut px = Vec::with_capacity(ch * cw * img.channels);
        for c in 0..img.channels {
            let plane = img.plane(c);
            for yy in oy..oy + ch {
                px.extend_from_slice(&plane[yy * img.width + ox..yy * img.width + ox + cw]);
            }
        }
        ImagePatch::new(ch, cw, img.channels, px).expect("crop geometry")
    };
    (cut(y), cut(x))
}

/// Mean MSE of the model over `examples`, in `f64`.
pub fn evaluate(model: &PosteriorModel, examples: &[Example<'_>], chunk: usize) -> Result<f64> {
    let ys: Vec<&ImagePatch> = examples.iter().map(|e| e.degraded).collect();
    let bs: Vec<&PerceptionBundle> = examples.iter().map(|e| e.bundle).collect();
    let mus = model.predict_all(&ys, &bs, chunk)?;
    let total: f64 = mus
        .iter()
        .zip(examples)
        .map(|(mu, e)| crate::metrics::mse(mu, e.clean).expect("same shape") * mu.pixels.len() as f64)
        .sum();
    let count: usize = mus.iter().map(|m| m.pixels.len()).sum();
    Ok(total / count as f64)
}

/// Minimises `mean((Ψ(Y, c) - X)²)` and returns the weights of the epoch with
/// the lowest validation loss.
pub fn train_posterior(
    arch: PosteriorArch,
    cfg: &TrainConfig,
    train: &[Example<'_>],
    val: &[Example<'_>],
) -> Result<(PosteriorModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and val sets must be non-empty"));
    }
    let mut model = PosteriorModel::new(arch, cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.adam, cfg.schedule(train.len()));
    let mut log = TrainLog {
        best_val: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.store.clone();
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in cfg.batches(train.len(), epoch).into_iter().enumerate() {
            let pairs: Vec<(ImagePatch, ImagePatch)> = batch
                .iter()
                .map(|&i| crop_pair(cfg, train[i].degraded, train[i].clean, epoch, i))
                .collect();
            let ys: Vec<&ImagePatch> = pairs.iter().map(|p| &p.0).collect();
            let xs: Vec<&ImagePatch> = pairs.iter().map(|p| &p.1).collect();
            let bundles: Vec<&PerceptionBundle> = batch.iter().map(|&i| train[i].bundle).collect();
            let mut tape = Tape::<f32>::new();
            let y = tape.constant(stack_images(&ys)?);
            let x = tape.constant(stack_images(&xs)?);
            let mu = model.net.forward(&mut tape, &model.store, y, &bundles)?;
            let loss = tape.mse(mu, x)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            tape.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            sum += lv * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = evaluate(&model, val, 64)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        log::info!("posterior epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        log.rows.push(LogRow {
            epoch,
            split: "train",
            loss: train_loss,
        });
        log.rows.push(LogRow {
            epoch,
            split: "val",
            loss: val_loss,
        });
        if val_loss < log.best_val {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            best = model.store.clone();
        }
    }
    model.store = best;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{synth_image, SynthParams};

    fn small_arch() -> PosteriorArch {
        PosteriorArch {
            channels: 4,
            ..PosteriorArch::default()
        }
    }

    #[test]
    fn untrained_model_is_identity() {
        let model = PosteriorModel::new(small_arch(), 3).unwrap();
        let y = synth_image(1, 0, &SynthParams::default());
        let mu = model.predict(&y, &PerceptionBundle::zeroed()).unwrap();
        assert!(mu.pixels.iter().zip(&y.pixels).all(|(a, b)| (a - b).abs() <= 1e-4));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let model = PosteriorModel::new(small_arch(), 3).unwrap();
        let y = ImagePatch::filled(32, 32, 3, 0.5);
        assert!(model.predict(&y, &PerceptionBundle::zeroed()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let mut model = PosteriorModel::new(small_arch(), 3).unwrap();
        model.store.randomize(5, 0.1);
        let ckpt = Checkpoint::from_bytes(&model.to_checkpoint("abc").to_bytes().unwrap()).unwrap();
        let back = PosteriorModel::from_checkpoint(&ckpt).unwrap();
        let y = synth_image(2, 0, &SynthParams::default());
        let b = PerceptionBundle::zeroed();
        assert_eq!(model.predict(&y, &b).unwrap(), back.predict(&y, &b).unwrap());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut seen: Vec<usize> = cfg.batches(10, 1).into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(cfg.schedule(10).total_steps, 60 * 4);
    }

    #[test]
    fn lr_order_is_validated() {
        let cfg = TrainConfig {
            lr_init: 1e-5,
            lr_final: 1e-4,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

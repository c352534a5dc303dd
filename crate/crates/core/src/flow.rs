//! Stage-2 residual rectified flow.
//!
//! The state lives in residual space `r = Z − μ`. The source is `r0 = δ·ε`, the
//! target `r1 = X − μ`, and the path `r_t = (1−t)·r0 + t·r1`. The network `Φ`
//! sees `r_t` stacked with broadcast channels for `t`, the normalised type
//! weights and the attribute scores. With the terminal-consistent wrapper the
//! velocity is `t·r_t + t(1−t)·Φ`; the direct variant uses `Φ` as the velocity.
//!
//! The baseline of the ablations feeds the absolute state `μ + r_t` instead,
//! which is the classic source `f(Y) + σ·ε` in shifted coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::numcore::nn::{Conv2d, Init};
use crate::numcore::{Adam, Checkpoint, ParamStore, Real, Tape, Tensor, Var};
use crate::perception::{self, PerceptionBundle, PerceptionConfig, N_ATTRS, N_TYPES};
use crate::posterior::{stack_images, unstack_images, LogRow, TrainConfig, TrainLog};
use crate::rng::{self, Purpose};

pub const CHECKPOINT_KIND: &str = "flow";
const COND: usize = 1 + N_TYPES + N_ATTRS;
/// Seed offset for the fixed noise and times of validation losses.
const VAL_SALT: u64 = 0x7661_6c00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Velocity {
    /// `v = t·r_t + t(1−t)·Φ`.
    Tc,
    /// `v = Φ`.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateInput {
    /// `Φ` sees `r_t`.
    Residual,
    /// `Φ` sees `μ + r_t`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowArch {
    pub channels: usize,
    pub image_channels: usize,
    /// When false the type and attribute channels are zero.
    pub conditioned: bool,
    pub velocity: Velocity,
    pub state: StateInput,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            channels: 32,
            image_channels: 1,
            conditioned: true,
            velocity: Velocity::Tc,
            state: StateInput::Residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub scheme: Scheme,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            scheme: Scheme::Euler,
        }
    }
}

/// Source scale per sample: from the perception bundle, or one fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    Adaptive(PerceptionConfig),
    Fixed(f64),
}

impl DeltaMode {
    pub fn delta(&self, bundle: &PerceptionBundle) -> f64 {
        match self {
            DeltaMode::Adaptive(cfg) => perception::difficulty(bundle, cfg).delta,
            DeltaMode::Fixed(d) => *d,
        }
    }
}

fn noise<T: Real>(shape: &[usize], seed: u64, index: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, Purpose::Noise, index);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::from_f64(rng::normal(&mut r))).collect(),
    )
    .expect("noise shape")
}

/// `(z0, r0) = (μ + δ·ε, δ·ε)` with `ε` from the noise stream `(seed, index)`.
pub fn make_source<T: Real>(mu: &Tensor<T>, delta: f64, seed: u64, index: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(delta >= 0.0) {
        return Err(Error::invalid("delta must be non-negative"));
    }
    let d = T::from_f64(delta);
    let r0 = noise::<T>(mu.shape(), seed, index).map(|e| d * e);
    let z0 = Tensor::new(
        mu.shape().to_vec(),
        mu.data().iter().zip(r0.data()).map(|(&m, &r)| m + r).collect(),
    )?;
    Ok((z0, r0))
}

/// `f(Y) + σ_s·ε`; the baseline source.
pub fn make_pmrf_source<T: Real>(fy: &Tensor<T>, sigma_s: f64, seed: u64, index: u64) -> Result<Tensor<T>> {
    make_source(fy, sigma_s, seed, index).map(|(z0, _)| z0)
}

/// `(1−t)·r0 + t·r1`.
pub fn interpolate<T: Real>(r0: &Tensor<T>, r1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    if r0.shape() != r1.shape() {
        return Err(Error::shape("interpolate", r0.shape(), r1.shape()));
    }
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    Tensor::new(
        r0.shape().to_vec(),
        r0.data().iter().zip(r1.data()).map(|(&x, &y)| a * x + b * y).collect(),
    )
}

/// Layer handles of `Φ`.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub arch: FlowArch,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl FlowNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, arch: FlowArch, seed: u64) -> Result<Self> {
        let (c, ic) = (arch.channels, arch.image_channels);
        if c == 0 || !(ic == 1 || ic == 3) {
            return Err(Error::invalid("flow needs channels > 0 and 1 or 3 image channels"));
        }
        let he = Init::He { gain: 1.0 };
        Ok(Self {
            arch,
            conv1: Conv2d::new(store, "phi.conv1", ic + COND, c, he, seed)?,
            conv2: Conv2d::new(store, "phi.conv2", c, c, he, seed)?,
            conv3: Conv2d::new(store, "phi.conv3", c, ic, Init::Zeros, seed)?,
        })
    }

    fn conditions(&self, bundles: &[&PerceptionBundle]) -> Vec<[f64; N_TYPES + N_ATTRS]> {
        bundles
            .iter()
            .map(|b| {
                if self.arch.conditioned {
                    b.condition_vector()
                } else {
                    [0.0; N_TYPES + N_ATTRS]
                }
            })
            .collect()
    }

    /// `Φ(state, t; c)` for a batch; `state: [B, C_img, H, W]`.
    pub fn phi<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: &Tensor<T>,
        t: &[f64],
        bundles: &[&PerceptionBundle],
    ) -> Result<Var> {
        let s = state.shape();
        if s.len() != 4 || s[1] != self.arch.image_channels {
            return Err(Error::shape("flow state", s, &[self.arch.image_channels]));
        }
        if t.len() != s[0] || bundles.len() != s[0] {
            return Err(Error::shape("flow batch", &[t.len(), bundles.len()], &[s[0]]));
        }
        let (ic, hw) = (s[1], s[2] * s[3]);
        let conds = self.conditions(bundles);
        let mut data = Vec::with_capacity(s[0] * (ic + COND) * hw);
        for (b, (&tb, cond)) in t.iter().zip(&conds).enumerate() {
            data.extend_from_slice(&state.data()[b * ic * hw..(b + 1) * ic * hw]);
            data.extend(std::iter::repeat_n(T::from_f64(tb), hw));
            for &c in cond {
                data.extend(std::iter::repeat_n(T::from_f64(c), hw));
            }
        }
        let x = tape.constant(Tensor::new(vec![s[0], ic + COND, s[2], s[3]], data)?);
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.silu(h);
        self.conv3.forward(tape, store, h)
    }

    /// Velocity at residual `r` and times `t`. `mu` is required for the
    /// absolute state input.
    pub fn velocity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        r: &Tensor<T>,
        mu: Option<&Tensor<T>>,
        t: &[f64],
        bundles: &[&PerceptionBundle],
    ) -> Result<Var> {
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("t = {bad} outside [0, 1]")));
        }
        let phi = match self.arch.state {
            StateInput::Residual => self.phi(tape, store, r, t, bundles)?,
            StateInput::Absolute => {
                let mu = mu.ok_or_else(|| Error::invalid("absolute state input needs the anchor"))?;
                if mu.shape() != r.shape() {
                    return Err(Error::shape("flow anchor", mu.shape(), r.shape()));
                }
                let z = Tensor::new(
                    r.shape().to_vec(),
                    mu.data().iter().zip(r.data()).map(|(&m, &x)| m + x).collect(),
                )?;
                self.phi(tape, store, &z, t, bundles)?
            }
        };
        match self.arch.velocity {
            Velocity::Direct => Ok(phi),
            Velocity::Tc => {
                let rv = tape.constant(r.clone());
                let tt: Vec<T> = t.iter().map(|&x| T::from_f64(x)).collect();
                let gate: Vec<T> = t.iter().map(|&x| T::from_f64(x * (1.0 - x))).collect();
                let a = tape.scale_rows(rv, &tt)?;
                let b = tape.scale_rows(phi, &gate)?;
                tape.add(a, b)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub net: FlowNet,
    pub store: ParamStore<f32>,
}

impl FlowModel {
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = FlowNet::new(&mut store, arch, seed)?;
        Ok(Self { net, store })
    }

    pub fn arch(&self) -> FlowArch {
        self.net.arch
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
        let arch: FlowArch = serde_json::from_value(ckpt.meta.model.clone())?;
        let mut model = Self::new(arch, 0)?;
        model.store.load_from(&ckpt.params)?;
        Ok(model)
    }
}

/// Velocity of a single residual `r: [C, H, W]` at time `t`.
pub fn tc_velocity(
    model: &FlowModel,
    r: &Tensor<f32>,
    mu: Option<&Tensor<f32>>,
    t: f64,
    bundle: &PerceptionBundle,
) -> Result<Tensor<f32>> {
    let s = r.shape().to_vec();
    let batch = |x: &Tensor<f32>| x.clone().reshape(&[1, s[0], s[1], s[2]]);
    let rb = batch(r)?;
    let mb = mu.map(batch).transpose()?;
    let mut tape = Tape::no_grad();
    let v = model
        .net
        .velocity(&mut tape, &model.store, &rb, mb.as_ref(), &[t], &[bundle])?;
    tape.value(v).clone().reshape(&s)
}

/// One (anchor, clean, condition, δ) item of stage-2 training.
#[derive(Debug, Clone, Copy)]
pub struct FlowExample<'a> {
    pub id: &'a str,
    pub mu: &'a ImagePatch,
    pub clean: &'a ImagePatch,
    pub bundle: &'a PerceptionBundle,
    pub delta: f64,
}

/// Draws for one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossDraws {
    pub seed: u64,
    /// Counter that selects the noise and time streams.
    pub index: u64,
    /// Pins every `t` to this value instead of sampling `U(0, 1)`.
    pub t_override: Option<f64>,
}

/// Records `mean((v(r_t, t) − (r1 − r0))²)` on `tape` for a batch.
pub fn flow_loss<T: Real>(
    tape: &mut Tape<T>,
    net: &FlowNet,
    store: &ParamStore<T>,
    batch: &[FlowExample<'_>],
    draws: &LossDraws,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty flow batch"));
    }
    let mus: Vec<&ImagePatch> = batch.iter().map(|e| e.mu).collect();
    let xs: Vec<&ImagePatch> = batch.iter().map(|e| e.clean).collect();
    let mu: Tensor<T> = stack_images(&mus)?;
    let x: Tensor<T> = stack_images(&xs)?;
    let per = mu.numel() / batch.len();
    let eps: Tensor<T> = noise(mu.shape(), draws.seed, draws.index);
    let mut time_rng = rng::stream(draws.seed, Purpose::Time, draws.index);
    let t: Vec<f64> = batch
        .iter()
        .map(|_| draws.t_override.unwrap_or_else(|| rng::uniform(&mut time_rng)))
        .collect();
    let mut rt = vec![T::zero(); mu.numel()];
    let mut target = vec![T::zero(); mu.numel()];
    for (b, e) in batch.iter().enumerate() {
        if !(e.delta >= 0.0) {
            return Err(Error::NonFiniteSample(e.id.to_string()));
        }
        let (d, tb) = (T::from_f64(e.delta), T::from_f64(t[b]));
        for i in b * per..(b + 1) * per {
            let r0 = d * eps.data()[i];
            let r1 = x.data()[i] - mu.data()[i];
            rt[i] = (T::one() - tb) * r0 + tb * r1;
            target[i] = r1 - r0;
        }
    }
    let rt = Tensor::new(mu.shape().to_vec(), rt)?;
    let bundles: Vec<&PerceptionBundle> = batch.iter().map(|e| e.bundle).collect();
    let v = net.velocity(tape, store, &rt, Some(&mu), &t, &bundles)?;
    let target = tape.constant(Tensor::new(mu.shape().to_vec(), target)?);
    let loss = tape.mse(v, target)?;
    if !tape.value(loss).item().as_f64().is_finite() {
        let id = batch.iter().map(|e| e.id).collect::<Vec<_>>().join(",");
        return Err(Error::NonFiniteSample(id));
    }
    Ok(loss)
}

/// Mean flow loss over `examples` with draws fixed by `seed`.
pub fn evaluate_flow(model: &FlowModel, examples: &[FlowExample<'_>], seed: u64, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for (i, batch) in examples.chunks(chunk.max(1)).enumerate() {
        let mut tape = Tape::<f32>::no_grad();
        let draws = LossDraws {
            seed,
            index: i as u64,
            t_override: None,
        };
        let loss = flow_loss(&mut tape, &model.net, &model.store, batch, &draws)?;
        total += tape.value(loss).item() as f64 * batch.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Seed of the fixed draws behind every validation loss of a run.
pub fn validation_seed(train_seed: u64) -> u64 {
    rng::mix64(train_seed, VAL_SALT)
}

/// Minimises the flow loss over `train`; returns the best-validation weights.
pub fn train_flow(
    arch: FlowArch,
    cfg: &TrainConfig,
    train: &[FlowExample<'_>],
    val: &[FlowExample<'_>],
) -> Result<(FlowModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and val sets must be non-empty"));
    }
    let mut model = FlowModel::new(arch, cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.adam, cfg.schedule(train.len()));
    let mut log = TrainLog {
        best_val: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.store.clone();
    let val_seed = validation_seed(cfg.seed);
    let mut step_index = 0u64;
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, idx) in cfg.batches(train.len(), epoch).into_iter().enumerate() {
            let batch: Vec<FlowExample<'_>> = idx.iter().map(|&i| train[i]).collect();
            let mut tape = Tape::<f32>::new();
            let draws = LossDraws {
                seed: cfg.seed,
                index: step_index,
                t_override: None,
            };
            step_index += 1;
            let loss = flow_loss(&mut tape, &model.net, &model.store, &batch, &draws).map_err(|e| match e {
                Error::NonFiniteSample(_) => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            let lv = tape.value(loss).item() as f64;
            tape.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            sum += lv * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        let val_loss = evaluate_flow(&model, val, val_seed, 64)?;
        log::info!("flow epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
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

/// Integrates the residual ODE from `r0 = δ·ε` on the grid `t_k = k/K` and
/// returns `μ + r(1)` for every item. Item `i` uses noise stream `(seed, first_index + i)`.
pub fn sample_batch(
    model: &FlowModel,
    mus: &[&ImagePatch],
    bundles: &[&PerceptionBundle],
    deltas: &[f64],
    sampler: &SamplerConfig,
    seed: u64,
    first_index: u64,
) -> Result<Vec<ImagePatch>> {
    if sampler.steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    if deltas.len() != mus.len() {
        return Err(Error::shape("sample deltas", &[deltas.len()], &[mus.len()]));
    }
    let mu: Tensor<f32> = stack_images(mus)?;
    let per = mu.numel() / mus.len();
    let mut r = vec![0f32; mu.numel()];
    for (b, &d) in deltas.iter().enumerate() {
        let (_, r0) = make_source(&Tensor::<f32>::zeros(&mu.shape()[1..]), d, seed, first_index + b as u64)?;
        r[b * per..(b + 1) * per].copy_from_slice(r0.data());
    }
    let mut r = Tensor::new(mu.shape().to_vec(), r)?;
    let k = sampler.steps;
    let h = 1.0 / k as f64;
    let n = mus.len();
    let eval = |r: &Tensor<f32>, t: f64| -> Result<Tensor<f32>> {
        let mut tape = Tape::no_grad();
        let v = model
            .net
            .velocity(&mut tape, &model.store, r, Some(&mu), &vec![t; n], bundles)?;
        Ok(tape.value(v).clone())
    };
    let axpy = |r: &Tensor<f32>, v: &Tensor<f32>, s: f64| -> Tensor<f32> {
        let s = s as f32;
        Tensor::new(
            r.shape().to_vec(),
            r.data().iter().zip(v.data()).map(|(&a, &b)| a + s * b).collect(),
        )
        .expect("same shape")
    };
    for step in 0..k {
        let t = step as f64 / k as f64;
        let v = match sampler.scheme {
            Scheme::Euler => eval(&r, t)?,
            Scheme::Midpoint => {
                let half = axpy(&r, &eval(&r, t)?, 0.5 * h);
                eval(&half, t + 0.5 * h)?
            }
        };
        r = axpy(&r, &v, h);
    }
    let out = Tensor::new(
        mu.shape().to_vec(),
        mu.data().iter().zip(r.data()).map(|(&m, &x)| m + x).collect(),
    )?;
    let images = unstack_images(&out)?;
    for (i, img) in images.iter().enumerate() {
        if img.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample(format!("item {}", first_index + i as u64)));
        }
    }
    Ok(images)
}

pub fn sample(
    model: &FlowModel,
    mu: &ImagePatch,
    bundle: &PerceptionBundle,
    delta: f64,
    sampler: &SamplerConfig,
    seed: u64,
    index: u64,
) -> Result<ImagePatch> {
    Ok(sample_batch(model, &[mu], &[bundle], &[delta], sampler, seed, index)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(data: Vec<f32>) -> Tensor<f32> {
        let n = data.len();
        Tensor::new(vec![1, 1, 1, n], data).unwrap()
    }

    #[test]
    fn source_examples() {
        let mu = Tensor::<f32>::full(&[1, 4, 4], 0.3);
        let (z0, r0) = make_source(&mu, 0.0, 1, 0).unwrap();
        assert_eq!(z0, mu);
        assert!(r0.data().iter().all(|&v| v == 0.0));
        let (a, _) = make_source(&mu, 0.1, 1, 0).unwrap();
        let (b, _) = make_source(&mu, 0.1, 1, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(make_pmrf_source(&mu, 0.1, 1, 0).unwrap(), a);
        assert!(make_source(&mu, -1.0, 1, 0).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let r0 = tensor(vec![0.0, 1.0]);
        let r1 = tensor(vec![4.0, -1.0]);
        assert_eq!(interpolate(&r0, &r1, 0.0).unwrap(), r0);
        assert_eq!(interpolate(&r0, &r1, 1.0).unwrap(), r1);
        assert_eq!(interpolate(&r0, &r1, 0.25).unwrap().data()[0], 1.0);
        assert!(interpolate(&r0, &r1, 1.5).is_err());
    }

    #[test]
    fn tc_velocity_scalar_case() {
        // Φ(...) = 4 is realised by a zero network with output bias 4
        let mut model = FlowModel::new(
            FlowArch {
                channels: 2,
                ..FlowArch::default()
            },
            0,
        )
        .unwrap();
        let bias = model.store.id("phi.conv3.bias").unwrap();
        model.store.get_mut(bias).value.data_mut()[0] = 4.0;
        let r = Tensor::full(&[1, 1, 1], 2.0f32);
        let v = tc_velocity(&model, &r, None, 0.5, &PerceptionBundle::zeroed()).unwrap();
        assert_eq!(v.data(), &[2.0]);
    }

    #[test]
    fn zero_delta_and_zero_phi_return_anchor() {
        let model = FlowModel::new(
            FlowArch {
                channels: 2,
                ..FlowArch::default()
            },
            0,
        )
        .unwrap();
        let mu = ImagePatch::filled(8, 8, 1, 0.4);
        let out = sample(
            &model,
            &mu,
            &PerceptionBundle::zeroed(),
            0.0,
            &SamplerConfig::default(),
            3,
            0,
        )
        .unwrap();
        assert_eq!(out, mu);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut model = FlowModel::new(
            FlowArch {
                channels: 3,
                velocity: Velocity::Direct,
                ..FlowArch::default()
            },
            0,
        )
        .unwrap();
        model.store.randomize(2, 0.2);
        let back =
            FlowModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint("h").to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back.arch(), model.arch());
        let r = Tensor::full(&[1, 4, 4], 0.1f32);
        let b = PerceptionBundle::zeroed();
        assert_eq!(
            tc_velocity(&model, &r, None, 0.3, &b).unwrap(),
            tc_velocity(&back, &r, None, 0.3, &b).unwrap()
        );
    }
}

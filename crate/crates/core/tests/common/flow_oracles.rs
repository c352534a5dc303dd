//! Closed-form checks of the velocity wrapper and the sampler.

use pvrf::flow::{make_source, sample_batch, tc_velocity, FlowArch, FlowModel, SamplerConfig, Scheme};
use pvrf::image::ImagePatch;
use pvrf::numcore::Tensor;
use pvrf::perception::{AttrPrior, PerceptionBundle, TypePrior};
use pvrf::rng::{self, Purpose};

fn random_bundle(seed: u64) -> PerceptionBundle {
    let mut r = rng::stream(seed, Purpose::Oracle, 77);
    let mut probs = [0.0; 5];
    probs.iter_mut().for_each(|p| *p = rng::uniform(&mut r));
    let mut scores = [0.0; 3];
    scores.iter_mut().for_each(|s| *s = rng::uniform(&mut r));
    PerceptionBundle::new(TypePrior { probs }, AttrPrior { scores }, 1e-8)
}

/// Largest `|v(r, 1) − r|` and `|v(r, 0)|` over `draws` random networks,
/// states and conditions.
pub fn terminal_consistency(draws: u64) -> (f32, f32) {
    let (mut at_one, mut at_zero) = (0f32, 0f32);
    for seed in 0..draws {
        let arch = FlowArch {
            channels: 4,
            conditioned: seed % 2 == 0,
            ..FlowArch::default()
        };
        let mut model = FlowModel::new(arch, seed).unwrap();
        model.store.randomize(seed, 0.5 + (seed % 5) as f64);
        let mut r = rng::stream(seed, Purpose::Noise, 5);
        let state: Vec<f32> = (0..64).map(|_| (3.0 * rng::normal(&mut r)) as f32).collect();
        let state = Tensor::new(vec![1, 8, 8], state).unwrap();
        let b = random_bundle(seed);
        let v1 = tc_velocity(&model, &state, None, 1.0, &b).unwrap();
        let v0 = tc_velocity(&model, &state, None, 0.0, &b).unwrap();
        for ((a, s), z) in v1.data().iter().zip(state.data()).zip(v0.data()) {
            at_one = at_one.max((a - s).abs());
            at_zero = at_zero.max(z.abs());
        }
    }
    (at_one, at_zero)
}

fn residual_after(steps: usize, scheme: Scheme, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let model = FlowModel::new(
        FlowArch {
            channels: 2,
            ..FlowArch::default()
        },
        0,
    )
    .unwrap();
    let mu = ImagePatch::filled(4, 4, 1, 0.5);
    let b = PerceptionBundle::zeroed();
    let sampler = SamplerConfig { steps, scheme };
    let out = sample_batch(&model, &[&mu], &[&b], &[delta], &sampler, 11, 0).unwrap();
    let (_, r0) = make_source(&Tensor::<f64>::zeros(&[1, 4, 4]), delta, 11, 0).unwrap();
    let r1 = out[0].pixels.iter().map(|&x| x as f64 - 0.5).collect();
    (r0.data().to_vec(), r1)
}

/// With `Φ ≡ 0` the residual ODE is `dr/dt = t·r`, so `r(1) = r0·e^{1/2}`.
/// Returns the worst relative error of Euler at `K = 1000` and the ratio of
/// successive `K → 2K` output differences starting from `K = 50`.
pub fn ode_oracle() -> (f64, f64) {
    let delta = 0.1;
    let exact = 0.5f64.exp();
    let (r0, r1) = residual_after(1000, Scheme::Euler, delta);
    let rel = r0
        .iter()
        .zip(&r1)
        .map(|(a, b)| ((b - a * exact) / (a * exact)).abs())
        .fold(0.0, f64::max);
    let out = |k| residual_after(k, Scheme::Euler, delta).1;
    let (a, b, c) = (out(50), out(100), out(200));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    (rel, diff(&a, &b) / diff(&b, &c))
}

/// Same convergence ratio for the midpoint scheme; second order gives about 4.
pub fn midpoint_factor() -> f64 {
    let out = |k| residual_after(k, Scheme::Midpoint, 0.1).1;
    let (a, b, c) = (out(10), out(20), out(40));
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    diff(&a, &b) / diff(&b, &c)
}

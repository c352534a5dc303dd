//! Quantization and difficulty checked against an independent evaluation.
//!
//! The oracle computes the two-way softmax through `tanh`, which shares no
//! code path with the logistic form used by the library.

use pvrf::perception::{
    difficulty_from_parts, normalize_simplex, quantize_attr, quantize_pair, quantize_types, LogitPair,
    PerceptionConfig, TypePrior,
};
use pvrf::rng::{self, Purpose};

pub const TEMPERATURE: f64 = 3.0;

fn oracle(pos: f64, neg: f64, temperature: f64) -> f64 {
    0.5 * (1.0 + ((pos - neg) / (2.0 * temperature)).tanh())
}

fn logit(r: &mut rng::StreamRng) -> f64 {
    // VLM logits are O(10); include a few extreme values
    let u = rng::uniform(r);
    if u < 0.05 {
        200.0 * (rng::uniform(r) - 0.5)
    } else {
        8.0 * rng::normal(r)
    }
}

/// Worst `|quantized − oracle|` over `pairs` random pairs, through the pair,
/// type and attribute entry points.
pub fn quantize_max_error(pairs: usize) -> f64 {
    let mut r = rng::stream(2024, Purpose::Oracle, 0);
    let mut worst = 0.0f64;
    let mut all = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (p, n) = (logit(&mut r), logit(&mut r));
        all.push(LogitPair::new(p, n));
        let q = quantize_pair(LogitPair::new(p, n), TEMPERATURE).unwrap();
        worst = worst.max((q - oracle(p, n, TEMPERATURE)).abs());
    }
    for chunk in all.chunks_exact(5) {
        let t = quantize_types(chunk, TEMPERATURE).unwrap();
        for (q, pair) in t.probs.iter().zip(chunk) {
            worst = worst.max((q - oracle(pair.positive, pair.negative, TEMPERATURE)).abs());
        }
    }
    for chunk in all.chunks_exact(3) {
        let a = quantize_attr(chunk, TEMPERATURE).unwrap();
        for (q, pair) in a.scores.iter().zip(chunk) {
            worst = worst.max((q - oracle(pair.positive, pair.negative, TEMPERATURE)).abs());
        }
    }
    worst
}

/// Worst `|Σ w − S/(S + τ)|` over random priors, including near-empty ones.
pub fn simplex_sum_deviation(draws: usize) -> f64 {
    let tau = 1e-8;
    let mut r = rng::stream(7, Purpose::Oracle, 1);
    let mut worst = 0.0f64;
    for i in 0..draws {
        let scale = if i % 10 == 0 { 1e-9 } else { 1.0 };
        let mut probs = [0.0; 5];
        probs.iter_mut().for_each(|p| *p = scale * rng::uniform(&mut r));
        let w = normalize_simplex(&TypePrior { probs }, tau);
        let s: f64 = probs.iter().sum();
        worst = worst.max((w.weights.iter().sum::<f64>() - s / (s + tau)).abs());
    }
    worst
}

/// `(δ for a uniform prior with perfect attributes, δ for one-hot with perfect attributes)`.
pub fn worked_deltas() -> (f64, f64) {
    let cfg = PerceptionConfig::default();
    let uniform = difficulty_from_parts(&[0.2; 5], &[1.0; 3], &cfg).delta;
    let one_hot = difficulty_from_parts(&[1.0, 0.0, 0.0, 0.0, 0.0], &[1.0; 3], &cfg).delta;
    (uniform, one_hot)
}

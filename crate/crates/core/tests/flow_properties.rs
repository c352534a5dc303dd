#[path = "common/flow_oracles.rs"]
mod flow_oracles;

use pvrf::degradations::{build_dataset, DataConfig};
use pvrf::flow::{
    evaluate_flow, flow_loss, make_pmrf_source, make_source, train_flow, validation_seed, DeltaMode, FlowArch,
    FlowExample, FlowModel, LossDraws, Velocity,
};
use pvrf::image::ImagePatch;
use pvrf::numcore::{Tape, Tensor};
use pvrf::perception::{PerceptionBundle, PerceptionConfig};
use pvrf::posterior::TrainConfig;
use pvrf::rng::{self, Purpose};

#[test]
fn terminal_and_origin_consistency_are_exact() {
    let (at_one, at_zero) = flow_oracles::terminal_consistency(100);
    assert_eq!(at_one, 0.0);
    assert_eq!(at_zero, 0.0);
}

#[test]
fn euler_matches_closed_form_and_converges_first_order() {
    let (rel, factor) = flow_oracles::ode_oracle();
    assert!(rel < 2e-3, "relative error {rel}");
    assert!((1.5..=2.5).contains(&factor), "halving factor {factor}");
}

#[test]
fn midpoint_converges_second_order() {
    let f = flow_oracles::midpoint_factor();
    assert!((3.0..=5.0).contains(&f), "factor {f}");
}

#[test]
fn source_variance_and_mean() {
    let delta = 0.07;
    let mu = Tensor::<f64>::zeros(&[1, 100, 100]);
    let mut sq = 0.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for index in 0..10 {
        let (_, r0) = make_source(&mu, delta, 3, index).unwrap();
        for v in r0.data() {
            sq += (v / delta).powi(2);
            sum += v / delta;
            n += 1;
        }
    }
    assert_eq!(n, 100_000);
    let var = sq / n as f64;
    assert!((0.97..=1.03).contains(&var), "{var}");
    // mean of 1e5 standard normals: 3σ = 3/sqrt(1e5)
    assert!((sum / n as f64).abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn pmrf_source_variance() {
    let sigma = 0.2;
    let fy = Tensor::<f64>::full(&[1, 100, 100], 0.3);
    let mut samples = Vec::with_capacity(100_000);
    for index in 0..10 {
        let z = make_pmrf_source(&fy, sigma, 8, index).unwrap();
        samples.extend(z.data().iter().map(|v| v - 0.3));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.03, "{var}");
    assert_eq!(make_pmrf_source(&fy, 0.0, 8, 0).unwrap(), fy);
}

fn patches(seed: u64, n: usize, offset: f32) -> Vec<ImagePatch> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Data, i as u64);
            ImagePatch::new(
                8,
                8,
                1,
                (0..64).map(|_| offset + 0.1 * rng::normal(&mut r) as f32).collect(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn loss_with_t_pinned_to_zero_is_target_energy() {
    let mus = patches(1, 3, 0.4);
    let xs = patches(2, 3, 0.5);
    let b = PerceptionBundle::zeroed();
    let deltas = [0.03, 0.06, 0.09];
    let batch: Vec<FlowExample<'_>> = (0..3)
        .map(|i| FlowExample {
            id: "x",
            mu: &mus[i],
            clean: &xs[i],
            bundle: &b,
            delta: deltas[i],
        })
        .collect();
    let mut model = FlowModel::new(
        FlowArch {
            channels: 3,
            ..FlowArch::default()
        },
        0,
    )
    .unwrap();
    model.store.randomize(4, 0.5);
    let store = model.store.cast::<f64>();
    let draws = LossDraws {
        seed: 9,
        index: 2,
        t_override: Some(0.0),
    };
    let mut tape = Tape::no_grad();
    let loss = flow_loss(&mut tape, &model.net, &store, &batch, &draws).unwrap();
    let got = tape.value(loss).item();

    // independent recomputation from the same noise stream
    let mut want = 0.0;
    let eps = {
        let mut r = rng::stream(9, Purpose::Noise, 2);
        (0..3 * 64).map(|_| rng::normal(&mut r)).collect::<Vec<f64>>()
    };
    for (b, e) in batch.iter().enumerate() {
        for j in 0..64 {
            let r0 = e.delta * eps[b * 64 + j];
            let r1 = e.clean.pixels[j] as f64 - e.mu.pixels[j] as f64;
            want += (r1 - r0).powi(2);
        }
    }
    want /= (3 * 64) as f64;
    assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn loss_is_zero_when_velocity_equals_target() {
    // at t = 1 with δ = 0 the wrapper returns r1, which is exactly the target
    let mus = patches(3, 2, 0.4);
    let xs = patches(4, 2, 0.6);
    let b = PerceptionBundle::zeroed();
    let batch: Vec<FlowExample<'_>> = (0..2)
        .map(|i| FlowExample {
            id: "x",
            mu: &mus[i],
            clean: &xs[i],
            bundle: &b,
            delta: 0.0,
        })
        .collect();
    let mut model = FlowModel::new(
        FlowArch {
            channels: 3,
            ..FlowArch::default()
        },
        0,
    )
    .unwrap();
    model.store.randomize(1, 1.0);
    let store = model.store.cast::<f64>();
    let mut tape = Tape::no_grad();
    let draws = LossDraws {
        seed: 0,
        index: 0,
        t_override: Some(1.0),
    };
    let loss = flow_loss(&mut tape, &model.net, &store, &batch, &draws).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);

    let direct = FlowModel::new(
        FlowArch {
            channels: 3,
            velocity: Velocity::Direct,
            ..FlowArch::default()
        },
        0,
    )
    .unwrap();
    let same: Vec<FlowExample<'_>> = (0..2)
        .map(|i| FlowExample {
            id: "x",
            mu: &mus[i],
            clean: &mus[i],
            bundle: &b,
            delta: 0.0,
        })
        .collect();
    let mut tape = Tape::no_grad();
    let loss = flow_loss(&mut tape, &direct.net, &direct.store.cast::<f64>(), &same, &draws).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

type Item = (ImagePatch, ImagePatch, PerceptionBundle, f64);

fn examples(v: &[Item]) -> Vec<FlowExample<'_>> {
    v.iter()
        .map(|(mu, x, b, d)| FlowExample {
            id: "s",
            mu,
            clean: x,
            bundle: b,
            delta: *d,
        })
        .collect()
}

#[test]
fn training_lowers_validation_loss_and_deltas_stay_in_range() {
    let perception = PerceptionConfig::default();
    let cfg = DataConfig {
        train_size: 96,
        val_size: 16,
        test_size: 1,
        ..DataConfig::default()
    };
    let data = build_dataset(&cfg, 5, &perception, "t").unwrap();
    // degraded inputs stand in for anchors
    let mode = DeltaMode::Adaptive(perception);
    let ex = |s: &[pvrf::degradations::PairedSample]| -> Vec<Item> {
        s.iter()
            .map(|p| (p.degraded.clone(), p.clean.clone(), p.bundle, mode.delta(&p.bundle)))
            .collect()
    };
    let (tr, va) = (ex(&data.train), ex(&data.val));
    for (_, _, _, d) in tr.iter().chain(&va) {
        assert!((0.025..=0.1).contains(d), "{d}");
    }
    let (train, val) = (examples(&tr), examples(&va));
    let arch = FlowArch {
        channels: 6,
        ..FlowArch::default()
    };
    for seed in 0..3 {
        let tc = TrainConfig {
            epochs: 8,
            batch_size: 8,
            lr_init: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let initial = evaluate_flow(&FlowModel::new(arch, seed).unwrap(), &val, validation_seed(seed), 64).unwrap();
        let (_, log) = train_flow(arch, &tc, &train, &val).unwrap();
        let last = *log.losses("val").last().unwrap();
        assert!(last < initial, "seed {seed}: {last} >= {initial}");
    }
}

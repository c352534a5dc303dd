//! Finite-difference gradient cases for every differentiable layer. Inputs are
//! registered as parameters so their gradients are checked too, and every
//! output is contracted with a fixed random tensor to form a scalar loss.

use pvrf::conditioning::{AmnLayer, WwaLayer};
use pvrf::flow::{flow_loss, FlowArch, FlowExample, FlowNet, LossDraws, Velocity};
use pvrf::image::ImagePatch;
use pvrf::numcore::gradcheck::{check_params, GradCheck};
use pvrf::numcore::nn::{Conv2d, Init, Linear};
use pvrf::numcore::{ParamStore, Tape, Tensor, Var};
use pvrf::perception::{AttrPrior, PerceptionBundle, TypePrior};
use pvrf::posterior::{PosteriorArch, PosteriorNet};
use pvrf::rng::{self, Purpose};
use pvrf::Result;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

pub type Case = fn(u64) -> Result<GradCheck>;

pub const CASES: [(&str, Case); 9] = [
    ("affine", affine),
    ("conv", conv),
    ("layer_norm", layer_norm),
    ("silu", silu),
    ("amn", amn),
    ("wwa", wwa),
    ("phi", phi),
    ("flow_loss", flow_loss_case),
    ("posterior", posterior),
];

pub const FLOW_TIMES: [f64; 3] = [0.25, 0.5, 0.75];

fn gaussian(shape: &[usize], seed: u64, index: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, Purpose::Init, 0xc0de_0000 + index);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn contract(tape: &mut Tape<f64>, out: Var, seed: u64, index: u64) -> Result<Var> {
    let w = tape.constant(gaussian(tape.shape(out), seed, index));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn bundle(seed: u64, index: u64) -> PerceptionBundle {
    let mut r = rng::stream(seed, Purpose::Oracle, index);
    let mut probs = [0.0; 5];
    probs.iter_mut().for_each(|p| *p = 0.05 + 0.9 * rng::uniform(&mut r));
    let mut scores = [0.0; 3];
    scores.iter_mut().for_each(|s| *s = rng::uniform(&mut r));
    PerceptionBundle::new(TypePrior { probs }, AttrPrior { scores }, 1e-8)
}

pub fn affine(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, Init::He { gain: 1.0 }, seed)?;
    let x = s.add("x", Tensor::zeros(&[2, 4]))?;
    s.randomize(seed, 0.7);
    check_params(
        &s,
        |t, s| {
            let xv = t.param(s, x);
            let y = lin.forward(t, s, xv)?;
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

pub fn conv(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let c = Conv2d::new(&mut s, "conv", 2, 3, Init::He { gain: 1.0 }, seed)?;
    let x = s.add("x", Tensor::zeros(&[2, 2, 5, 4]))?;
    s.randomize(seed, 0.7);
    check_params(
        &s,
        |t, s| {
            let xv = t.param(s, x);
            let y = c.forward(t, s, xv)?;
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

pub fn layer_norm(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", Tensor::zeros(&[2, 3, 4, 3]))?;
    s.randomize(seed, 1.0);
    check_params(
        &s,
        |t, s| {
            let xv = t.param(s, x);
            let y = t.layer_norm(xv)?;
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

pub fn silu(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", Tensor::zeros(&[2, 3, 3, 3]))?;
    s.randomize(seed, 2.0);
    check_params(
        &s,
        |t, s| {
            let xv = t.param(s, x);
            let y = t.silu(xv);
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

pub fn amn(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let layer = AmnLayer::new(&mut s, "amn", 3, seed)?;
    let f = s.add("f", Tensor::zeros(&[2, 3, 4, 4]))?;
    let f_mid = s.add("f_mid", Tensor::zeros(&[2, 3, 2, 2]))?;
    let a = s.add("attrs", Tensor::zeros(&[2, 3]))?;
    s.randomize(seed, 0.8);
    check_params(
        &s,
        |t, s| {
            let (fv, mv, av) = (t.param(s, f), t.param(s, f_mid), t.param(s, a));
            let (o1, o2) = layer.forward(t, s, fv, mv, av)?;
            let l1 = contract(t, o1, seed, 0)?;
            let l2 = contract(t, o2, seed, 1)?;
            t.add(l1, l2)
        },
        H,
        FLOOR,
    )
}

pub fn wwa(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let layer = WwaLayer::new(&mut s, "wwa", 2, Init::He { gain: 1.0 }, seed)?;
    let x = s.add("x", Tensor::zeros(&[2, 2, 4, 4]))?;
    s.randomize(seed, 0.5);
    let weights = [
        bundle(seed, 0).normalized_type.weights,
        bundle(seed, 1).normalized_type.weights,
    ];
    check_params(
        &s,
        |t, s| {
            let xv = t.param(s, x);
            let y = layer.forward(t, s, xv, &weights)?;
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

pub fn phi(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let arch = FlowArch {
        channels: 4,
        ..FlowArch::default()
    };
    let net = FlowNet::new(&mut s, arch, seed)?;
    s.randomize(seed, 0.4);
    let state = gaussian(&[2, 1, 6, 5], seed, 1);
    let (b0, b1) = (bundle(seed, 0), bundle(seed, 1));
    check_params(
        &s,
        |t, s| {
            let y = net.phi(t, s, &state, &[0.3, 0.8], &[&b0, &b1])?;
            contract(t, y, seed, 0)
        },
        H,
        FLOOR,
    )
}

fn patch(seed: u64, index: u64, offset: f32) -> ImagePatch {
    let g = gaussian(&[1, 6, 6], seed, 100 + index);
    ImagePatch::new(6, 6, 1, g.data().iter().map(|&v| offset + 0.1 * v as f32).collect()).unwrap()
}

/// Flow loss of the TC and direct velocities at one pinned time.
pub fn flow_loss_at(seed: u64, t_pin: f64, velocity: Velocity) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let arch = FlowArch {
        channels: 4,
        velocity,
        ..FlowArch::default()
    };
    let net = FlowNet::new(&mut s, arch, seed)?;
    s.randomize(seed, 0.4);
    let (mu0, mu1, x0, x1) = (
        patch(seed, 0, 0.4),
        patch(seed, 1, 0.5),
        patch(seed, 2, 0.45),
        patch(seed, 3, 0.55),
    );
    let (b0, b1) = (bundle(seed, 0), bundle(seed, 1));
    let batch = [
        FlowExample {
            id: "a",
            mu: &mu0,
            clean: &x0,
            bundle: &b0,
            delta: 0.05,
        },
        FlowExample {
            id: "b",
            mu: &mu1,
            clean: &x1,
            bundle: &b1,
            delta: 0.09,
        },
    ];
    let draws = LossDraws {
        seed,
        index: 0,
        t_override: Some(t_pin),
    };
    check_params(&s, |t, s| flow_loss(t, &net, s, &batch, &draws), H, FLOOR)
}

/// Worst case over the pinned times and both velocity forms.
pub fn flow_loss_case(seed: u64) -> Result<GradCheck> {
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
    };
    for t in FLOW_TIMES {
        for v in [Velocity::Tc, Velocity::Direct] {
            let g = flow_loss_at(seed, t, v)?;
            worst.max_rel_error = worst.max_rel_error.max(g.max_rel_error);
            worst.checked += g.checked;
        }
    }
    Ok(worst)
}

/// The whole stage-1 network at a tiny width.
pub fn posterior(seed: u64) -> Result<GradCheck> {
    let mut s = ParamStore::<f64>::new();
    let arch = PosteriorArch {
        channels: 2,
        ..PosteriorArch::default()
    };
    let net = PosteriorNet::new(&mut s, arch, seed)?;
    s.randomize(seed, 0.4);
    let y = gaussian(&[2, 1, 8, 8], seed, 7).map(|v| 0.5 + 0.2 * v);
    let (b0, b1) = (bundle(seed, 0), bundle(seed, 1));
    check_params(
        &s,
        |t, s| {
            let yv = t.constant(y.clone());
            let out = net.forward(t, s, yv, &[&b0, &b1])?;
            contract(t, out, seed, 0)
        },
        H,
        FLOOR,
    )
}

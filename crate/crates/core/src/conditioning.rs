//! Perception injection layers.
//!
//! [`AmnLayer`] maps the attribute scores to per-channel scales and biases for
//! two layer-normalised feature maps. [`WwaLayer`] mixes `N_TYPES` parallel
//! conv branches with the normalised type weights of each sample.

use crate::error::{Error, Result};
use crate::numcore::nn::{Conv2d, Init, Linear};
use crate::numcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::perception::{N_ATTRS, N_TYPES};

#[derive(Debug, Clone)]
pub struct AmnLayer {
    pub modulation: Linear,
    pub channels: usize,
}

impl AmnLayer {
    /// Zero weights and a bias encoding `λ = 1, β = 0`, so the layer starts as
    /// plain layer normalisation for every input.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, seed: u64) -> Result<Self> {
        let c = channels;
        let bias: Vec<f64> = (0..4 * c).map(|i| if (i / c) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let bias = Tensor::from_f64(&[4 * c], &bias)?;
        let modulation = Linear::with_bias(store, &format!("{name}.modulation"), N_ATTRS, Init::Zeros, bias, seed)?;
        Ok(Self { modulation, channels })
    }

    /// Returns `(λ1 ⊙ LN(f) + β1, λ2 ⊙ LN(f_mid) + β2)`. `attrs` is `[B, M]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
        f_mid: Var,
        attrs: Var,
    ) -> Result<(Var, Var)> {
        let out_f = self.modulate(tape, store, f, attrs, 0)?;
        let out_mid = self.modulate(tape, store, f_mid, attrs, 1)?;
        Ok((out_f, out_mid))
    }

    /// `λ_k ⊙ LN(x) + β_k` for one of the two modulated maps (`k` is 0 or 1).
    pub fn modulate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        attrs: Var,
        k: usize,
    ) -> Result<Var> {
        let c = self.channels;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != c || k > 1 {
            return Err(Error::shape("amn features", &s, &[c]));
        }
        let a = tape.shape(attrs);
        if a.len() != 2 || a[1] != N_ATTRS || a[0] != s[0] {
            return Err(Error::shape("amn attributes", a, &[s[0], N_ATTRS]));
        }
        let m = self.modulation.forward(tape, store, attrs)?;
        let lam = tape.narrow_cols(m, 2 * k * c, c)?;
        let beta = tape.narrow_cols(m, (2 * k + 1) * c, c)?;
        let lam = tape.broadcast_channels(lam, s[2], s[3])?;
        let beta = tape.broadcast_channels(beta, s[2], s[3])?;
        let n = tape.layer_norm(x)?;
        let scaled = tape.mul(lam, n)?;
        tape.add(scaled, beta)
    }
}

#[derive(Debug, Clone)]
pub struct WwaBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct WwaLayer {
    pub branches: Vec<WwaBranch>,
    pub channels: usize,
}

impl WwaLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, init: Init, seed: u64) -> Result<Self> {
        let branches = (0..N_TYPES)
            .map(|i| {
                Ok(WwaBranch {
                    conv1: Conv2d::new(
                        store,
                        &format!("{name}.branch{i}.conv1"),
                        channels,
                        channels,
                        init,
                        seed,
                    )?,
                    conv2: Conv2d::new(
                        store,
                        &format!("{name}.branch{i}.conv2"),
                        channels,
                        channels,
                        init,
                        seed,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches, channels })
    }

    pub fn branch<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, i: usize, x: Var) -> Result<Var> {
        let b = &self.branches[i];
        let h = b.conv1.forward(tape, store, x)?;
        let h = tape.silu(h);
        b.conv2.forward(tape, store, h)
    }

    /// `Σ_i w_i · branch_i(f_in)` with one weight row per batch item. Branches
    /// whose weight is zero for the whole batch are not evaluated.
    pub fn forward<T: Real, W: AsRef<[f64]>>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_in: Var,
        weights: &[W],
    ) -> Result<Var> {
        let s = tape.shape(f_in).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape("wwa input", &s, &[self.channels]));
        }
        if weights.len() != s[0] {
            return Err(Error::shape("wwa weights", &[weights.len()], &[s[0]]));
        }
        if let Some(w) = weights.iter().find(|w| w.as_ref().len() != N_TYPES) {
            return Err(Error::shape("wwa weights", &[w.as_ref().len()], &[N_TYPES]));
        }
        let mut acc: Option<Var> = None;
        for i in 0..N_TYPES {
            let coeffs: Vec<T> = weights.iter().map(|w| T::from_f64(w.as_ref()[i])).collect();
            if coeffs.iter().all(|c| c.is_zero()) {
                continue;
            }
            let y = self.branch(tape, store, i, f_in)?;
            let y = tape.scale_rows(y, &coeffs)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&s)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, Purpose::Data, 0);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn amn_is_layer_norm_at_init() {
        let mut store = ParamStore::<f64>::new();
        let amn = AmnLayer::new(&mut store, "amn", 4, 0).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(random(&[2, 4, 3, 3], 1), false);
        let fm = tape.leaf(random(&[2, 4, 2, 2], 2), false);
        let a = tape.leaf(random(&[2, 3], 3), false);
        let (o1, o2) = amn.forward(&mut tape, &store, f, fm, a).unwrap();
        let l1 = tape.layer_norm(f).unwrap();
        let l2 = tape.layer_norm(fm).unwrap();
        assert_eq!(tape.value(o1).data(), tape.value(l1).data());
        assert_eq!(tape.value(o2).data(), tape.value(l2).data());
    }

    fn forced(lam: f64, beta: f64) -> (ParamStore<f64>, AmnLayer) {
        let mut store = ParamStore::<f64>::new();
        let amn = AmnLayer::new(&mut store, "amn", 3, 0).unwrap();
        let c = 3;
        let b = store.get_mut(amn.modulation.bias);
        for (i, v) in b.value.data_mut().iter_mut().enumerate() {
            *v = if (i / c) % 2 == 0 { lam } else { beta };
        }
        (store, amn)
    }

    #[test]
    fn amn_zero_scale_gives_constant_bias() {
        let (store, amn) = forced(0.0, 0.7);
        let mut tape = Tape::new();
        let f = tape.leaf(random(&[1, 3, 4, 4], 4), false);
        let a = tape.leaf(random(&[1, 3], 5), false);
        let (o, _) = amn.forward(&mut tape, &store, f, f, a).unwrap();
        assert!(tape.value(o).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn amn_scale_two_bias_one() {
        let (store, amn) = forced(2.0, 1.0);
        let mut tape = Tape::new();
        let f = tape.leaf(random(&[2, 3, 4, 4], 6), false);
        let a = tape.leaf(random(&[2, 3], 7), false);
        let (o, _) = amn.forward(&mut tape, &store, f, f, a).unwrap();
        let ln = tape.layer_norm(f).unwrap();
        for (&y, &l) in tape.value(o).data().iter().zip(tape.value(ln).data()) {
            assert!((y - (2.0 * l + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn amn_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let amn = AmnLayer::new(&mut store, "amn", 4, 0).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(random(&[1, 3, 4, 4], 1), false);
        let a = tape.leaf(random(&[1, 3], 1), false);
        assert!(amn.forward(&mut tape, &store, f, f, a).is_err());
    }

    fn wwa() -> (ParamStore<f64>, WwaLayer) {
        let mut store = ParamStore::<f64>::new();
        let layer = WwaLayer::new(&mut store, "wwa", 2, Init::He { gain: 1.0 }, 9).unwrap();
        store.randomize(9, 0.3);
        (store, layer)
    }

    fn run(store: &ParamStore<f64>, layer: &WwaLayer, x: &Tensor<f64>, w: [f64; 5]) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let out = layer.forward(&mut tape, store, xv, &[w]).unwrap();
        tape.value(out).data().to_vec()
    }

    fn branch(store: &ParamStore<f64>, layer: &WwaLayer, x: &Tensor<f64>, i: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let out = layer.branch(&mut tape, store, i, xv).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn wwa_selection_average_and_empty_mixture() {
        let (store, layer) = wwa();
        let x = random(&[1, 2, 5, 5], 3);
        let k = 1.0 / (1.0 + 1e-8);
        let one_hot = run(&store, &layer, &x, [0.0, 0.0, k, 0.0, 0.0]);
        for (a, b) in one_hot.iter().zip(branch(&store, &layer, &x, 2)) {
            assert!((a - k * b).abs() < 1e-12);
        }
        let half = run(&store, &layer, &x, [0.5 * k, 0.5 * k, 0.0, 0.0, 0.0]);
        let (b0, b1) = (branch(&store, &layer, &x, 0), branch(&store, &layer, &x, 1));
        for ((a, p), q) in half.iter().zip(&b0).zip(&b1) {
            assert!((a - k * 0.5 * (p + q)).abs() < 1e-12);
        }
        assert!(run(&store, &layer, &x, [0.0; 5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wwa_rejects_wrong_arity() {
        let (store, layer) = wwa();
        let mut tape = Tape::new();
        let xv = tape.leaf(random(&[1, 2, 4, 4], 1), false);
        assert!(layer.forward(&mut tape, &store, xv, &[vec![0.2; 4]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn wwa_is_linear_in_weights(
            w1 in proptest::array::uniform5(0.0f64..1.0),
            w2 in proptest::array::uniform5(0.0f64..1.0),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let (store, layer) = wwa();
            let x = random(&[1, 2, 4, 4], 8);
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(p, q)| a * p + b * q).collect();
            let lhs = run(&store, &layer, &x, mix.try_into().unwrap());
            let r1 = run(&store, &layer, &x, w1);
            let r2 = run(&store, &layer, &x, w2);
            for ((l, p), q) in lhs.iter().zip(&r1).zip(&r2) {
                proptest::prop_assert!((l - (a * p + b * q)).abs() < 1e-5);
            }
        }
    }
}

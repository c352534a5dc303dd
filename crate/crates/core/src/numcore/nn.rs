//! Parameterised layers on top of the tape primitives.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::param::{ParamId, ParamStore};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{Real, Tensor};
use crate::rng::{self, Purpose};

/// Weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `gain · sqrt(2 / fan_in)`.
    He {
        gain: f64,
    },
    Zeros,
}

fn init_tensor<T: Real>(shape: &[usize], fan_in: usize, init: Init, seed: u64, index: u64) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::He { gain } => {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let mut r = rng::stream(seed, Purpose::Init, index);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(dist.sample(&mut r))).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// 3×3 convolution registered as `{name}.weight` / `{name}.bias`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, 3, 3];
        let w = init_tensor(&shape, in_channels * 9, init, seed, store.len() as u64);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        let shape = [out_features, in_features];
        let w = init_tensor(&shape, in_features, init, seed, store.len() as u64);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    /// Same as [`new`](Self::new) but with an explicit bias vector.
    pub fn with_bias<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        init: Init,
        bias: Tensor<T>,
        seed: u64,
    ) -> Result<Self> {
        let out_features = bias.numel();
        let w = init_tensor(
            &[out_features, in_features],
            in_features,
            init,
            seed,
            store.len() as u64,
        );
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }
}

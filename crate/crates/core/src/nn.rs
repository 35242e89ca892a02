//! Parameters, equalized-learning-rate layers and the Adam optimizer.
//!
//! Weights are stored with unit-normal initialization and rescaled at run
//! time by `sqrt(2 / fan_in)`, so every layer learns at the same effective
//! rate regardless of its fan-in.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{self, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self::new(name, Tensor::new(shape, data))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

/// Puts parameters on the tape for one forward pass and remembers which
/// leaves belong to which parameter so gradients can be collected by name.
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder {
    /// Parameters become leaves that gradients flow to.
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            bound: Vec::new(),
        }
    }

    /// Parameters are constants (inference, or a network held fixed while
    /// the other one is updated).
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        if self.trainable {
            if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == &p.name) {
                return v.clone();
            }
            let v = Var::leaf(p.value.clone());
            self.bound.push((p.name.clone(), v.clone()));
            v
        } else {
            Var::constant(p.value.clone())
        }
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients of `loss` for every bound parameter, keyed by name.
    /// Parameters the loss does not reach get zeros.
    pub fn gradients(&self, loss: &Var) -> BTreeMap<String, Tensor> {
        let leaves: Vec<&Var> = self.bound.iter().map(|(_, v)| v).collect();
        let grads = autograd::grad(loss, &leaves, false);
        self.bound
            .iter()
            .zip(grads)
            .map(|((name, v), g)| {
                let g = g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn he_scale(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    scale: f32,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), &[outputs, inputs], rng),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
            scale: he_scale(inputs),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x` is `[N, inputs]`.
    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = b.bind(&self.weight).scale(self.scale);
        let bias = b.bind(&self.bias);
        let y = x.matmul(&w.transpose());
        let shape = y.shape().to_vec();
        y.add(&bias.broadcast_to(&shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    scale: f32,
}

impl Conv2d {
    pub fn new(name: &str, inputs: usize, outputs: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), &[outputs, inputs, kernel, kernel], rng),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
            scale: he_scale(inputs * kernel * kernel),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = b.bind(&self.weight).scale(self.scale);
        let bias = b.bind(&self.bias);
        let y = x.conv2d(&w);
        let c = self.out_channels();
        let shape = y.shape().to_vec();
        y.add(&bias.reshape(&[1, c, 1, 1]).broadcast_to(&shape))
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam with per-parameter step counts, so parameters introduced mid-run
/// start with fresh moments and their own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let step = lr / bc1;
            let m = st.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = st.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (st.m.data(), st.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *w -= step * mi / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Drops state for parameters not in `keep`.
    pub fn retain(&mut self, keep: &HashMap<String, ()>) {
        self.state.retain(|k, _| keep.contains_key(k));
    }
}

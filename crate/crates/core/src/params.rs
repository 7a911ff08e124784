//! Named parameter tensors, their optimizer groups, and binding onto a tape.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Which learning rate a parameter trains at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The modulator: probes, its CLS token, the reasoning module and its head.
    Caam,
    /// Multimodal encoder, representation CLS, and projection heads.
    Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter in a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            trainable: true,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total scalar count of the given parameters.
    pub fn count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.params[id.0].value.len()).sum()
    }

    /// Places every parameter on the tape; trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.requires_grad = p.trainable;
                tape.leaf(&t)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("shape")
    }

    /// Uniform Xavier/Glorot for a `fan_in × fan_out` weight.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()).expect("shape")
    }
}

/// Affine map `x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init::xavier(d_in, d_out, rng));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, d_out));
        Self { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(d_in, d_out));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b[self.weight])?;
        tape.add_row(y, b[self.bias])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::filled(1, d, 1.0));
        let shift = store.add(format!("{name}.shift"), group, Tensor::zeros(1, d));
        Self { gamma, shift }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, b[self.gamma], b[self.shift])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.shift]
    }
}

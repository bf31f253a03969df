//! Trainable parameter storage and the basic layers built on it.

use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Stride, Tape, Tensor, Var};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The decoder's endmember kernel.
    Endmember,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.variable(p.value.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes `var` for the parameter `id`, e.g. to differentiate
    /// with respect to one parameter in isolation.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Seeded parameter factory. Weights and biases are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.store.add(name, value, ParamGroup::Rest)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, value), ParamGroup::Rest)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        self.store.add(name, value, group)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: init.uniform(&format!("{name}.weight"), &[din, dout], din),
            bias: init.uniform(&format!("{name}.bias"), &[dout], din),
        }
    }

    /// Zero weights and bias.
    pub fn zeros(init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: init.constant(&format!("{name}.weight"), &[din, dout], 0.0),
            bias: init.constant(&format!("{name}.bias"), &[dout], 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: Stride,
}

impl Conv2d {
    /// Zero-padded `k x k` convolution.
    pub fn new(init: &mut Init, name: &str, k: usize, cin: usize, cout: usize, stride: Stride) -> Self {
        let fan_in = k * k * cin;
        Self {
            kernel: init.uniform(&format!("{name}.kernel"), &[k, k, cin, cout], fan_in),
            bias: init.uniform(&format!("{name}.bias"), &[cout], fan_in),
            stride,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d_bias(p[self.kernel], p[self.bias], self.stride, true)
    }
}

/// `k x 1 x 1` spectral convolution over depth-major tensors.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv3d {
    pub fn new(init: &mut Init, name: &str, k: usize, cin: usize, cout: usize) -> Self {
        let fan_in = k * cin;
        Self {
            kernel: init.uniform(&format!("{name}.kernel"), &[k, 1, 1, cin, cout], fan_in),
            bias: init.uniform(&format!("{name}.bias"), &[cout], fan_in),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3d_bias(p[self.kernel], p[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), &[channels], 1.0),
            shift: init.constant(&format!("{name}.shift"), &[channels], 0.0),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gain], p[self.shift], Self::EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Linear::new(&mut Init::new(&mut a, 3), "l", 4, 5);
        Linear::new(&mut Init::new(&mut b, 3), "l", 4, 5);
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let bound = 0.5;
        assert!(a.iter().all(|(_, p)| p.value.data().iter().all(|v| v.abs() <= bound)));
    }
}

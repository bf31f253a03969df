//! Adam with decoupled weight decay and per-group learning rates.

use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr_endmember: f32,
    pub lr_rest: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamWConfig {
    pub fn new(lr_endmember: f32, lr_rest: f32, weight_decay: f32) -> Self {
        Self {
            lr_endmember,
            lr_rest,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f32 {
        match group {
            ParamGroup::Endmember => self.lr_endmember,
            ParamGroup::Rest => self.lr_rest,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. `grads[i]` belongs to the `i`-th parameter of `store`;
    /// `None` counts as a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&[f32]>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step);
        let bias2 = 1.0 - c.beta2.powi(self.step);
        for ((((_, param), g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let lr = c.lr(param.group);
            let decay = 1.0 - lr * c.weight_decay;
            let data = param.value.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.eps);
                data[i] = data[i] * decay - lr * update;
            }
        }
    }
}

/// Rescales `grads` in place so their joint Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > f64::from(max_norm) {
        let k = (f64::from(max_norm) / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= k));
    }
    norm
}

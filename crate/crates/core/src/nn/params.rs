use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named trainable tensors.
///
/// Registration order is part of the architecture: checkpoints store values
/// in this order and two stores built from the same config line up index by
/// index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialised convolution weight `[out, in_per_group, k, k]`.
    pub fn conv_weight(
        &mut self,
        name: &str,
        rng: &mut SeededRng,
        out_ch: usize,
        in_per_group: usize,
        k: usize,
        gain: f64,
    ) -> ParamId {
        let fan_in = (in_per_group * k * k) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let n = out_ch * in_per_group * k * k;
        let data = (0..n).map(|_| std * rng.normal()).collect();
        let t = Tensor::new(vec![out_ch, in_per_group, k, k], data).expect("sized");
        self.add(name, t)
    }

    pub fn bias(&mut self, name: &str, out_ch: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[out_ch]))
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> ParamId {
        self.add(name, Tensor::full(&[1], value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// All parameters flattened in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrite all parameters from a flat vector in registration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> bool {
        if flat.len() != self.count() {
            return false;
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        true
    }

    pub fn zero_grads(&self) -> GradStore {
        GradStore {
            grads: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        let v = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.values.iter_mut().enumerate() {
            let g = grads.grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= learning_rate * mh / (vh.sqrt() + epsilon);
            }
        }
    }
}

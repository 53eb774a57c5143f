//! Adaptive-moment gradient descent and the cosine learning-rate schedule.
//!
//! Update rule per parameter p with gradient g (see README for the same
//! equations in prose):
//!   m <- b1 m + (1-b1) g
//!   v <- b2 v + (1-b2) g^2
//!   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<E: Element = f32> {
    cfg: AdamConfig,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    t: u64,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<E>) -> Self {
        let zeros: Vec<Tensor<E>> =
            store.ids().map(|id| Tensor::zeros(store.get(id).value.shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Restores moment state (e.g. from a checkpoint).
    pub fn from_state(cfg: AdamConfig, m: Vec<Tensor<E>>, v: Vec<Tensor<E>>, t: u64) -> Self {
        Self { cfg, m, v, t }
    }

    pub fn moments(&self) -> (&[Tensor<E>], &[Tensor<E>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Registers moment slots for parameters added to the store after
    /// construction (stage two adds the prototype parameters).
    pub fn extend_for(&mut self, store: &ParamStore<E>) {
        for i in self.m.len()..store.len() {
            let shape = store.get(crate::tensor::ParamId(i)).value.shape().to_vec();
            self.m.push(Tensor::zeros(&shape));
            self.v.push(Tensor::zeros(&shape));
        }
    }

    /// One update from the gradients accumulated in `Parameter::grad`.
    /// The caller resets gradients afterwards.
    pub fn step(&mut self, store: &mut ParamStore<E>, lr: f64) {
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one = E::one();
        let corr1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = E::from_f64(self.cfg.eps);
        let lr = E::from_f64(lr);
        for i in 0..store.len() {
            let p = store.get_mut(crate::tensor::ParamId(i));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let val = p.value.data_mut();
            for j in 0..val.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / corr1;
                let vh = v[j] / corr2;
                val[j] = val[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Cosine-annealed learning rate over a fixed step budget:
/// `lr0/2 * (1 + cos(pi * s/(S-1)))`, so the first step runs at `lr0` and
/// the last at (numerically) zero.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return lr0;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

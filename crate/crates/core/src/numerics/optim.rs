//! AdamW with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::param::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[j]);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[3.0, -2.0]), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut tape = Tape::new();
            let v = tape.param(&store, x);
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap().into_params();
            opt.step(&mut store, &g);
        }
        assert!(store.value(x).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[3.0, -2.0]), true).unwrap();
        let before = store.fingerprint(|_| true);
        let mut g = ParamGrads::new();
        g.accumulate(x, &[1.0, 1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &g);
        assert_eq!(before, store.fingerprint(|_| true));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[0.0, 0.0]), true).unwrap();
        let mut g = ParamGrads::new();
        g.accumulate(x, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}

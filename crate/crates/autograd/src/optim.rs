//! Adam and a warmup-plus-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state for every parameter in a store. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}

/// Linear warmup over the first `warmup_frac` of training, then cosine decay to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_frac * total).round();
        let s = step as f64;
        if warm > 0.0 && s < warm {
            return self.base * (s + 1.0) / warm;
        }
        let progress = ((s - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base: 1.0,
            total_steps: 100,
            warmup_frac: 0.1,
        };
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!(s.lr(0) < s.lr(5));
        assert!(s.lr(50) < s.lr(20));
        assert!(s.lr(99) < 0.01);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let w = store.get(id).clone();
            let mut g = Grads::zeros_like(&store);
            g.set(id, Tensor::row_vector(w.data.iter().map(|x| 2.0 * x).collect()));
            opt.step(&mut store, &g, 0.01);
        }
        assert!(store.get(id).norm() < 1e-2);
    }
}

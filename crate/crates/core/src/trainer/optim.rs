//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied per parameter; parameters frozen for a while start
    /// their bias correction when they first move.
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Apply one update with learning rate `lr`. Parameters for which
    /// `trainable` is false are left untouched, moments included.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !trainable(store.name(id)) {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * weight_decay * p[j];
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_reference() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let g1 = Tensor::vector(vec![0.1, -0.3, 0.0]);
        let g2 = Tensor::vector(vec![0.2, 0.1, -0.4]);
        let lr = 0.01;
        opt.step(&mut store, std::slice::from_ref(&g1), lr, |_| true);
        opt.step(&mut store, std::slice::from_ref(&g2), lr, |_| true);

        // Independent scalar recomputation.
        let (b1, b2, eps, wd) = (0.9f64, 0.98f64, 1e-6, 0.01);
        for j in 0..3 {
            let mut p = [1.0, -2.0, 0.5][j];
            let (mut m, mut v) = (0.0, 0.0);
            for (t, g) in [g1.data()[j], g2.data()[j]].into_iter().enumerate() {
                let t = (t + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                p = p - lr * wd * p - lr * mh / (vh.sqrt() + eps);
            }
            let got = store.by_name("w").unwrap().data()[j];
            assert!((got - p).abs() < 1e-15, "component {j}: {got} vs {p}");
        }

        // A zero gradient moves a parameter by decay alone.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Tensor::vector(vec![0.0])], lr, |_| true);
        assert_eq!(store.by_name("w").unwrap().data()[0], 0.5 - lr * wd * 0.5);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0]));
        store.insert("b", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let g = [Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        opt.step(&mut store, &g, 0.1, |n| n == "a");
        assert_ne!(store.by_name("a").unwrap().data()[0], 1.0);
        assert_eq!(store.by_name("b").unwrap().data()[0], 1.0);
        assert_eq!(opt.steps, vec![1, 0]);
    }
}

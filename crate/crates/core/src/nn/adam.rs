use serde::{Deserialize, Serialize};

use super::param::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with per-tensor step counts. Tensors without a gradient buffer are
/// left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, steps: vec![0; store.len()] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id);
            for j in 0..w.len() {
                let gj = g[j] + weight_decay * w[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::ParamScope;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[3], ParamScope::Shared, vec![1.0, 2.0, 3.0]);
        let b = store.add("b", &[1], ParamScope::Shared, vec![5.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = Grads::new(&store);
        grads.acc(&store, a).copy_from_slice(&[0.5, -2.0, 0.0]);
        adam.step(&mut store, &grads, 0.1);
        let got = store.get(a);
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] - 2.1).abs() < 1e-6);
        assert_eq!(got[2], 3.0);
        assert_eq!(store.get(b), &[5.0]);
        assert_eq!(adam.steps, vec![1, 0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], ParamScope::Shared, vec![3.0, -4.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = Grads::new(&store);
        for _ in 0..2000 {
            grads.clear();
            let w = store.get(a).to_vec();
            grads.acc(&store, a).copy_from_slice(&[2.0 * (w[0] - 1.0), 2.0 * (w[1] + 0.5)]);
            adam.step(&mut store, &grads, 0.05);
        }
        let w = store.get(a);
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] + 0.5).abs() < 1e-3, "{w:?}");
    }
}

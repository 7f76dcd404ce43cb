use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Mat;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

/// AdamW with per-parameter step counts. Parameters without a gradient in a step are
/// left untouched, including weight decay.
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    steps: Vec<u32>,
}

pub fn global_norm(grads: &[Option<Mat>]) -> f64 {
    grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let n = store.len();
        Self { config, m: vec![None; n], v: vec![None; n], steps: vec![0; n] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = global_norm(grads);
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.0;
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let g = g * scale;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *w -= c.lr * (update + c.weight_decay * *w);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut store = ParamStore::default();
        let id = store.add("w", array![[1.0, -2.0]]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Some(array![[3.0, -0.5]])]);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn parameters_without_gradient_are_unchanged() {
        let mut store = ParamStore::default();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Some(array![[1.0]]), None]);
        assert_ne!(store.value(a)[[0, 0]], 1.0);
        assert_eq!(store.value(b)[[0, 0]], 1.0);
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Decoupled-weight-decay Adam restricted to an explicit trainable set.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    trainable: Vec<ParamId>,
    m: BTreeMap<ParamId, Mat>,
    v: BTreeMap<ParamId, Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, trainable: Vec<ParamId>) -> Self {
        Self {
            config,
            trainable,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for ids outside the trainable set are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        let c = self.config;
        let grads: BTreeMap<ParamId, &Mat> = grads
            .iter()
            .filter(|(id, _)| self.trainable.binary_search(id).is_ok())
            .map(|(id, g)| (*id, g))
            .collect();
        let norm: f64 = grads
            .values()
            .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = store.get_mut(id);
            let m = self.m.entry(id).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.v.entry(id).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}

impl AdamW {
    /// Builds an optimizer over every parameter whose name starts with one of `prefixes`.
    pub fn for_prefixes(config: AdamConfig, store: &ParamStore, prefixes: &[&str]) -> Self {
        let mut ids: Vec<ParamId> = prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect();
        ids.sort();
        ids.dedup();
        Self::new(config, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrainable_params_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Mat::scalar(1.0));
        let b = s.add("b", Mat::scalar(1.0));
        let mut opt = AdamW::for_prefixes(AdamConfig { lr: 0.1, ..Default::default() }, &s, &["a"]);
        opt.step(&mut s, &[(a, Mat::scalar(1.0)), (b, Mat::scalar(1.0))]);
        assert!(s.get(a).data[0] < 1.0);
        assert_eq!(s.get(b).data[0], 1.0);
    }
}

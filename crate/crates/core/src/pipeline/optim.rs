//! AdamW with decoupled weight decay over named parameter stores.

use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// Restore from saved moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: ParamStore, v: ParamStore) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &ParamStore {
        &self.m
    }

    pub fn second_moments(&self) -> &ParamStore {
        &self.v
    }

    /// One update of every tensor in `stores` that has an entry in `grads`.
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                let Some(g) = grads.get(name) else { continue };
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!("gradient of {name}"), p.shape(), g.shape()));
                }
                if !self.m.contains(name) {
                    self.m.insert(name.clone(), Tensor::zeros(p.raw_dim()));
                    self.v.insert(name.clone(), Tensor::zeros(p.raw_dim()));
                }
                let m = self.m.get_mut(name).expect("inserted");
                m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                let v = self.v.get_mut(name).expect("inserted");
                v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                let m = &self.m.get(name).expect("inserted");
                let v = &self.v.get(name).expect("inserted");
                ndarray::Zip::from(&mut **p).and(*m).and(*v).for_each(|p, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + eps) + weight_decay * *p;
                    *p -= lr * update;
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        store.insert("w", crate::autograd::tensor(&[2], vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), crate::autograd::tensor(&[2], vec![3.0, -0.5]));
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut [&mut store], &grads).unwrap();
        let w = store.get("w").unwrap();
        assert!((w[[0]] - 0.9).abs() < 1e-7);
        assert!((w[[1]] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", crate::autograd::tensor(&[1], vec![2.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), crate::autograd::tensor(&[1], vec![0.0]));
        let mut opt = AdamW::new(cfg(0.01));
        opt.step(&mut [&mut store], &grads).unwrap();
        assert!((store.get("w").unwrap()[[0]] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn params_without_gradients_untouched() {
        let mut store = ParamStore::new();
        store.insert("frozen", crate::autograd::tensor(&[1], vec![5.0]));
        let mut opt = AdamW::new(cfg(0.01));
        opt.step(&mut [&mut store], &BTreeMap::new()).unwrap();
        assert_eq!(store.get("frozen").unwrap()[[0]], 5.0);
    }
}

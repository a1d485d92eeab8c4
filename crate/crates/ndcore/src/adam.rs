//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::store::ParamStore;
use crate::{NdError, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One optimizer step over the given (name, grad) pairs.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if g.len() != p.data.len() {
                return Err(NdError::Contract(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, -1.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        adam.apply(&mut store, &[("w".into(), vec![0.0, 0.0])]).unwrap();
        assert_eq!(store.get("w").unwrap().data, vec![1.0, -1.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_is_minus_lr() {
        // bias-corrected update at t=1 with g=1 gives almost exactly -lr
        let mut store = ParamStore::new();
        store.insert("w", &[1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        adam.apply(&mut store, &[("w".into(), vec![1.0])]).unwrap();
        let w = store.get("w").unwrap().data[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // minimize (w-5)^2 from w=0, lr=0.1, 100 steps
        let mut store = ParamStore::new();
        store.insert("w", &[1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        for _ in 0..100 {
            let w = store.get("w").unwrap().data[0];
            let g = 2.0 * (w - 5.0);
            adam.apply(&mut store, &[("w".into(), vec![g])]).unwrap();
        }
        let w = store.get("w").unwrap().data[0];
        assert!((w - 5.0).abs() < 0.5, "w = {w}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        assert!(adam.apply(&mut store, &[("w".into(), vec![1.0])]).is_err());
    }
}

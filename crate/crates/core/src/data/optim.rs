//! Decoupled-weight-decay Adam and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    /// First and second moments, one vector per storage slot.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.tensor.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored in `store`. Entries flagged
    /// without decay (norms, biases, embedding tables) skip the decay term.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.storage_count() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                store.storage_count()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(lr / c1);
        let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
        let eps = T::from_f64(self.eps);
        for ((entry, m), v) in store.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if entry.decay { T::from_f64(lr * self.weight_decay) } else { T::zero() };
            let grad = match entry.tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let values = entry.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() * inv_sqrt_c2 + eps;
                values[i] = values[i] - decay * values[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm` and
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .entries()
        .iter()
        .filter_map(|e| e.tensor.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for e in store.entries_mut() {
            if let Some(g) = e.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;
    use crate::numerics::DiffTensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", DiffTensor::filled(vec![2], 1.0), Component::Ffn, true).unwrap();
        s.insert("g", DiffTensor::filled(vec![2], 1.0), Component::Norms, false).unwrap();
        s
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-8, 0.1);
        opt.update(&mut s, 0.01).unwrap();
        assert_eq!(s.get("w").unwrap().values(), &[1.0 - 0.01 * 0.1; 2]);
        assert_eq!(s.get("g").unwrap().values(), &[1.0; 2]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        s.get_mut("g").unwrap().grad_mut().unwrap().copy_from_slice(&[3.0, -0.5]);
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-12, 0.0);
        opt.update(&mut s, 0.01).unwrap();
        let g = s.get("g").unwrap().values();
        assert!((g[0] - 0.99).abs() < 1e-9 && (g[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = store();
        s.get_mut("w").unwrap().grad_mut().unwrap().copy_from_slice(&[3.0, 0.0]);
        s.get_mut("g").unwrap().grad_mut().unwrap().copy_from_slice(&[0.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((clip_grad_norm(&mut s, 1.0) - 1.0).abs() < 1e-12);
    }
}

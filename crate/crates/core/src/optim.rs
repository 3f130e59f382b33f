//! Adam with bias correction and a cosine-annealed learning rate.

use alloc::vec::Vec;

use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every parameter in
    /// `grads`. Frozen parameters are skipped even if a gradient is present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Learning rate after `step` of `total` steps, annealed from `base` to 0.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::from_vec(&[2], alloc::vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            let g = ps.get(id).map(|v| 2.0 * v);
            opt.step(&mut ps, &[(id, g)], 0.01);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut ps = ParamStore::new();
        let id = ps.insert("idn.x", Tensor::scalar(1.0));
        ps.set_trainable("idn", false);
        let mut opt = Adam::new(0.9, 0.999);
        opt.step(&mut ps, &[(id, Tensor::scalar(5.0))], 0.1);
        assert_eq!(ps.get(id).item(), 1.0);
    }
}

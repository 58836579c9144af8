//! Adam with per-parameter moments keyed by parameter name.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{Module, Param};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter whose name passes `trainable`.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / libm::sqrt(bc2));
        let eps = T::of(self.eps);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name: &str, p: &mut Param<T>| {
            if !trainable(name) {
                return;
            }
            let mo = moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![T::zero(); p.len()], v: vec![T::zero(); p.len()] });
            for i in 0..p.len() {
                let g = p.grad[i];
                mo.m[i] = b1 * mo.m[i] + one_b1 * g;
                mo.v[i] = b2 * mo.v[i] + one_b2 * g * g;
                p.value[i] -= step_size * mo.m[i] / (mo.v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        });
    }

    /// Forgets the moments of parameters matching `pred`.
    pub fn reset_where(&mut self, pred: &dyn Fn(&str) -> bool) {
        self.moments.retain(|k, _| !pred(k));
    }
}

/// Every parameter is trainable.
pub fn all(_: &str) -> bool {
    true
}

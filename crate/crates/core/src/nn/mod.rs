//! Layers with hand-written backward passes.
//!
//! Forward passes are pure (`&self`). Backward passes take the cached forward
//! activations and accumulate parameter gradients into `Param::grad`.

mod backbone;
mod conv;
mod linear;
mod pool;

pub use backbone::{Backbone, BackboneConfig, BackboneTrace, BlockConfig};
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    /// He-normal initialization, `std = gain * sqrt(2 / fan_in)`.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * libm::sqrt(2.0 / fan_in as f64);
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::of(z * std);
        }
        p
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = T::of(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything holding named parameters.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// Names and shapes in visiting order.
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(String::from(name)));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// Zeroes `grad` wherever the post-activation `output` is not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Tensor<T>, output: &Tensor<T>) {
    grad.data_mut().iter_mut().zip(output.data()).for_each(|(g, &o)| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

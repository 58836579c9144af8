use rand::Rng;

use super::{join, Module, Param};
use crate::real::{gemm, Op, Real};
use crate::tensor::Tensor;

/// Affine map `y = x W^T + b` on `[batch, in]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::fan_in_uniform(&[out_features, in_features], in_features, rng),
            bias: Param::fan_in_uniform(&[out_features], in_features, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.dim(0);
        assert_eq!(x.dim(1), self.in_features, "linear input features");
        let mut y = Tensor::zeros(&[b, self.out_features]);
        for i in 0..b {
            y.item_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(b, self.in_features, self.out_features, x.data(), Op::N, &self.weight.value, Op::T, y.data_mut(), true);
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let b = x.dim(0);
        gemm(self.out_features, b, self.in_features, grad_out.data(), Op::T, x.data(), Op::N, &mut self.weight.grad, true);
        for i in 0..b {
            for (g, &d) in self.bias.grad.iter_mut().zip(grad_out.item(i)) {
                *g += d;
            }
        }
        need_input_grad.then(|| {
            let mut dx = Tensor::zeros(&[b, self.in_features]);
            gemm(b, self.out_features, self.in_features, grad_out.data(), Op::N, &self.weight.value, Op::N, dx.data_mut(), false);
            dx
        })
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

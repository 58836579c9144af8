use alloc::vec;

use rand::Rng;

use super::{join, Module, Param};
use crate::real::{gemm, Op, Real};
use crate::tensor::Tensor;

/// 2-D convolution with "same"-style padding `kernel / 2`, lowered to a matrix
/// product over an im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * k * k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: Param::he_normal(&[out_channels, fan_in], fan_in, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, col: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[b, self.out_channels, ho, wo]);
        let mut col = if self.is_pointwise() { vec![] } else { vec![T::zero(); kk * ho * wo] };
        for i in 0..b {
            let xi = x.item(i);
            let oi = out.item_mut(i);
            for (o, &bias) in self.bias.value.iter().enumerate() {
                oi[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = bias);
            }
            let cols = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, ho, wo, &mut col);
                &col
            };
            gemm(self.out_channels, kk, ho * wo, &self.weight.value, Op::N, cols, Op::N, oi, true);
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = (grad_out.dim(2), grad_out.dim(3));
        let kk = self.in_channels * self.kernel * self.kernel;
        let plane = ho * wo;
        let mut col = vec![T::zero(); kk * plane];
        let mut dcol = vec![T::zero(); kk * plane];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..b {
            let g = grad_out.item(i);
            for o in 0..self.out_channels {
                let s: T = g[o * plane..(o + 1) * plane].iter().copied().sum();
                self.bias.grad[o] += s;
            }
            let cols = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, ho, wo, &mut col);
                &col
            };
            gemm(self.out_channels, plane, kk, g, Op::N, cols, Op::T, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    gemm(kk, self.out_channels, plane, &self.weight.value, Op::T, g, Op::N, dx.item_mut(i), true);
                } else {
                    gemm(kk, self.out_channels, plane, &self.weight.value, Op::T, g, Op::N, &mut dcol, false);
                    self.col2im_add(&dcol, h, w, ho, wo, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

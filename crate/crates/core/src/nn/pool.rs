use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Max pooling with padding `kernel / 2`; padded cells never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        let f = |n: usize| (n + 2 * p - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Returns the pooled tensor and, per output cell, the flat input offset of
    /// the winning element within its item.
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let p = (self.kernel / 2) as isize;
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let mut arg = vec![0usize; b * c * ho * wo];
        for n in 0..b {
            let xi = x.item(n);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = (ch * h + iy as usize) * w + ix as usize;
                                if xi[idx] > best {
                                    best = xi[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        let o = (ch * ho + oy) * wo + ox;
                        out.item_mut(n)[o] = best;
                        arg[(n * c * ho * wo) + o] = best_i;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn backward<T: Real>(&self, input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(input_shape);
        let per = grad_out.item_len();
        for n in 0..grad_out.dim(0) {
            let g = grad_out.item(n);
            let di = dx.item_mut(n);
            for (o, &gv) in g.iter().enumerate() {
                di[argmax[n * per + o]] += gv;
            }
        }
        dx
    }
}

/// `[b, c, h, w] -> [b, c]` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let inv = T::of(1.0 / plane as f64);
    let mut out = Tensor::zeros(&[b, c]);
    for n in 0..b {
        let xi = x.item(n);
        for ch in 0..c {
            let s: T = xi[ch * plane..(ch + 1) * plane].iter().copied().sum();
            out.item_mut(n)[ch] = s * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (input_shape[0], input_shape[1]);
    let plane = input_shape[2] * input_shape[3];
    let inv = T::of(1.0 / plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for n in 0..b {
        for ch in 0..c {
            let g = grad_out.item(n)[ch] * inv;
            dx.item_mut(n)[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

//! Eigen-CAM: project final-block activations onto their first principal
//! direction, then overlay the map on the input image.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::model::ComFaceModel;
use crate::real::Real;
use crate::tensor::Tensor;

/// A heat map in `[0, 1]`, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Eigenvalues and eigenvectors (columns of `vectors`) of a symmetric `n x n`
/// matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j] * a[i * n + j]).sum();
        if off <= scale * 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn top_eigenvector(matrix: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(matrix, n);
    let top = (0..n).fold(0, |best, i| if vals[i] > vals[best] { i } else { best });
    (0..n).map(|k| vecs[k * n + top]).collect()
}

/// Eigen-CAM of one `[C, H', W']` activation block.
///
/// With `A` the `(H'W') x C` matrix of activations and `v1` its first right
/// singular vector, the map is `A v1`, signed so its largest-magnitude entry is
/// positive, then min-max normalized. A constant map normalizes to all ones.
pub fn eigen_cam(activations: &[f64], channels: usize, height: usize, width: usize) -> Result<SaliencyMap> {
    let hw = height * width;
    if activations.len() != channels * hw || hw == 0 || channels == 0 {
        return Err(contract_err!("activation block of {} values is not {channels}x{height}x{width}", activations.len()));
    }
    if activations.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::string::String::from("activation block")));
    }
    if activations.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(alloc::string::String::from("all-zero activations have no principal direction")));
    }
    // A[p, c] = activations[c * hw + p]
    let a = |p: usize, c: usize| activations[c * hw + p];
    let mut map = vec![0.0; hw];
    if channels <= hw {
        let mut gram = vec![0.0; channels * channels];
        for i in 0..channels {
            for j in i..channels {
                let s: f64 = (0..hw).map(|p| a(p, i) * a(p, j)).sum();
                gram[i * channels + j] = s;
                gram[j * channels + i] = s;
            }
        }
        let v1 = top_eigenvector(&gram, channels);
        for (p, m) in map.iter_mut().enumerate() {
            *m = (0..channels).map(|c| a(p, c) * v1[c]).sum();
        }
    } else {
        // A v1 = sigma1 u1, and u1 is the top eigenvector of A A^T.
        let mut gram = vec![0.0; hw * hw];
        for i in 0..hw {
            for j in i..hw {
                let s: f64 = (0..channels).map(|c| a(i, c) * a(j, c)).sum();
                gram[i * hw + j] = s;
                gram[j * hw + i] = s;
            }
        }
        map = top_eigenvector(&gram, hw);
    }
    let peak = map.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
    if peak < 0.0 {
        map.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(SaliencyMap { height, width, values: min_max(map) })
}

fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= hi.abs().max(lo.abs()) * 1e-12 {
        v.iter_mut().for_each(|x| *x = 1.0);
    } else {
        v.iter_mut().for_each(|x| *x = ((*x - lo) / span).clamp(0.0, 1.0));
    }
    v
}

/// Eigen-CAM of the final backbone block for `image`.
pub fn model_saliency<T: Real>(model: &ComFaceModel<T>, image: &Image) -> Result<SaliencyMap> {
    model.check_images(&[image])?;
    let fmap = model.backbone.feature_map(&Tensor::from_images(&[image]));
    let (c, h, w) = (fmap.dim(1), fmap.dim(2), fmap.dim(3));
    let acts: Vec<f64> = fmap.data().iter().map(|v| v.as_f64()).collect();
    eigen_cam(&acts, c, h, w)
}

/// Bilinear resize with pixel-center alignment and clamped borders.
pub fn upsample_bilinear(map: &SaliencyMap, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let mut out = Vec::with_capacity(out_h * out_w);
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let v = |yy: usize, xx: usize| map.values[yy * w + xx];
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Jet-style colour for `t` in `[0, 1]`.
pub fn heat_color(t: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// `(1 - alpha) * image + alpha * heat_color(map)`, with the map upsampled to the image.
pub fn overlay(map: &SaliencyMap, image: &Image, alpha: f64) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let up = upsample_bilinear(map, h, w);
    if up.len() != h * w {
        return Err(contract_err!("upsampled map has {} values for a {h}x{w} image", up.len()));
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let color = heat_color(up[y * w + x]);
            for (c, &col) in color.iter().enumerate().take(CHANNELS) {
                let v = (1.0 - alpha) * image.get(c, y, x) as f64 + alpha * col;
                out.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

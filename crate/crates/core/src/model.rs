//! The full network: backbone `f`, projection head `g` (two affine layers with a
//! ReLU between, output L2-normalized) and change head `l` applied to
//! `ReLU(h_y - h_x)`.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::image::Image;
use crate::nn::{relu_inplace, Backbone, BackboneConfig, Linear, Module, Param};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

/// Added to the norm before dividing so a zero projection stays finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[height, width]` of input images.
    pub input_size: [usize; 2],
    pub backbone: BackboneConfig,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: [64, 64], backbone: BackboneConfig::default(), projection_hidden: 128, projection_dim: 64 }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.input_size.iter().any(|&s| s == 0) || self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(config_err!("model dimensions must be positive"));
        }
        let (h, w) = self.backbone.out_size(self.input_size[0], self.input_size[1]);
        if h == 0 || w == 0 {
            return Err(config_err!("input {:?} vanishes inside the backbone", self.input_size));
        }
        Ok(())
    }
}

/// `g`: E -> hidden -> P, then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

/// Cached forward state of the projection head.
#[derive(Debug, Clone)]
pub struct ProjectionTrace<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    raw: Tensor<T>,
    norms: Vec<T>,
    pub z: Tensor<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn forward_trace(&self, h: &Tensor<T>) -> ProjectionTrace<T> {
        let mut hidden = self.hidden.forward(h);
        relu_inplace(&mut hidden);
        let raw = self.output.forward(&hidden);
        let eps = T::of(NORM_EPS);
        let mut z = raw.clone();
        let mut norms = Vec::with_capacity(raw.dim(0));
        for i in 0..raw.dim(0) {
            let row = z.item_mut(i);
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            row.iter_mut().for_each(|v| *v /= n + eps);
            norms.push(n);
        }
        ProjectionTrace { input: h.clone(), hidden, raw, norms, z }
    }

    pub fn forward(&self, h: &Tensor<T>) -> Tensor<T> {
        self.forward_trace(h).z
    }

    /// Accumulates parameter gradients and returns `d loss / d h`.
    pub fn backward(&mut self, trace: &ProjectionTrace<T>, grad_z: &Tensor<T>) -> Tensor<T> {
        let eps = T::of(NORM_EPS);
        let mut grad_raw = grad_z.clone();
        for i in 0..grad_z.dim(0) {
            let n = trace.norms[i];
            let u = trace.raw.item(i);
            let g = grad_z.item(i);
            let d = n + eps;
            let ug: T = u.iter().zip(g).map(|(a, b)| *a * *b).sum();
            let coeff = if n > T::zero() { ug / (n * d * d) } else { T::zero() };
            for (k, out) in grad_raw.item_mut(i).iter_mut().enumerate() {
                *out = g[k] / d - u[k] * coeff;
            }
        }
        let mut grad_hidden = self.output.backward(&trace.hidden, &grad_raw, true).expect("input grad");
        crate::nn::relu_backward_inplace(&mut grad_hidden, &trace.hidden);
        self.hidden.backward(&trace.input, &grad_hidden, true).expect("input grad")
    }
}

/// `l`: a single affine map E -> 1 over `ReLU(h_y - h_x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeHead<T> {
    pub linear: Linear<T>,
}

impl<T: Real> ChangeHead<T> {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(embed_dim, 1, rng) }
    }

    /// `ReLU(h_y - h_x)` row-wise.
    pub fn rectified_difference(h_x: &Tensor<T>, h_y: &Tensor<T>) -> Tensor<T> {
        assert_eq!(h_x.shape(), h_y.shape(), "change head inputs differ in shape");
        let data = h_x.data().iter().zip(h_y.data()).map(|(&x, &y)| (y - x).max(T::zero())).collect();
        Tensor::from_vec(h_x.shape(), data)
    }

    pub fn forward(&self, h_x: &Tensor<T>, h_y: &Tensor<T>) -> Vec<T> {
        self.linear.forward(&Self::rectified_difference(h_x, h_y)).into_data()
    }

    /// Accumulates parameter gradients; returns `(d/d h_x, d/d h_y)`.
    pub fn backward(&mut self, h_x: &Tensor<T>, h_y: &Tensor<T>, grad_d: &[T]) -> (Tensor<T>, Tensor<T>) {
        let r = Self::rectified_difference(h_x, h_y);
        let g = Tensor::from_vec(&[grad_d.len(), 1], grad_d.to_vec());
        let mut grad_r = self.linear.backward(&r, &g, true).expect("input grad");
        crate::nn::relu_backward_inplace(&mut grad_r, &r);
        let grad_x = Tensor::from_vec(grad_r.shape(), grad_r.data().iter().map(|&v| -v).collect());
        (grad_x, grad_r)
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        *self = Self::new(self.linear.in_features, rng);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComFaceModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub projection: ProjectionHead<T>,
    pub change: ChangeHead<T>,
}

impl<T: Real> ComFaceModel<T> {
    /// Randomly initialized model; weights are a pure function of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived_stream(seed, "model-init", &[]);
        let backbone = Backbone::new(&config.backbone, &mut r)?;
        let e = config.embed_dim();
        let projection = ProjectionHead {
            hidden: Linear::new(e, config.projection_hidden, &mut r),
            output: Linear::new(config.projection_hidden, config.projection_dim, &mut r),
        };
        let change = ChangeHead::new(e, &mut r);
        Ok(Self { config: config.clone(), backbone, projection, change })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn check_images(&self, images: &[&Image]) -> Result<()> {
        let [h, w] = self.config.input_size;
        for (i, img) in images.iter().enumerate() {
            if (img.height(), img.width()) != (h, w) {
                return Err(config_err!("image {i} is {}x{}, model expects {h}x{w}", img.height(), img.width()));
            }
        }
        Ok(())
    }

    /// `h = f(x)` for each image, `[batch, E]`.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor<T>> {
        self.check_images(images)?;
        if images.is_empty() {
            return Ok(Tensor::zeros(&[0, self.embed_dim()]));
        }
        Ok(self.backbone.forward(&Tensor::from_images(images)))
    }

    /// `z = g(h) / |g(h)|`, `[batch, P]`.
    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.shape().len() != 2 || h.dim(1) != self.embed_dim() {
            return Err(contract_err!("projection expects [batch, {}], got {:?}", self.embed_dim(), h.shape()));
        }
        Ok(self.projection.forward(h))
    }

    /// `d = l(ReLU(h_y - h_x))` per row.
    pub fn change_distance(&self, h_x: &Tensor<T>, h_y: &Tensor<T>) -> Result<Vec<T>> {
        if h_x.shape() != h_y.shape() || h_x.shape().len() != 2 || h_x.dim(1) != self.embed_dim() {
            return Err(contract_err!("change head inputs {:?} / {:?}", h_x.shape(), h_y.shape()));
        }
        Ok(self.change.forward(h_x, h_y))
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> ComFaceModel<U> {
        let mut out = ComFaceModel::<U>::new(&self.config, 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.iter().map(|v| U::of(v.as_f64())).collect::<Vec<U>>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| p.value = it.next().expect("same layout"));
        out
    }
}

impl<T: Real> Module<T> for ComFaceModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(&crate::nn::join(prefix, "backbone"), f);
        self.projection.hidden.visit(&crate::nn::join(prefix, "projection.0"), f);
        self.projection.output.visit(&crate::nn::join(prefix, "projection.1"), f);
        self.change.linear.visit(&crate::nn::join(prefix, "change"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(&crate::nn::join(prefix, "backbone"), f);
        self.projection.hidden.visit_mut(&crate::nn::join(prefix, "projection.0"), f);
        self.projection.output.visit_mut(&crate::nn::join(prefix, "projection.1"), f);
        self.change.linear.visit_mut(&crate::nn::join(prefix, "change"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use alloc::vec;

    fn tiny() -> ModelConfig {
        ModelConfig { input_size: [8, 8], backbone: BackboneConfig::plain(&[4, 8]), projection_hidden: 8, projection_dim: 4 }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut r = stream(seed);
        (0..n).map(|_| Image::from_planar(size, size, (0..3 * size * size).map(|_| r.gen_range(0.0..1.0)).collect())).collect()
    }

    #[test]
    fn shape_contracts() {
        let m = ComFaceModel::<f64>::new(&tiny(), 1).unwrap();
        for b in [1, 3, 5] {
            let imgs = random_images(b, 8, b as u64);
            let refs: Vec<&Image> = imgs.iter().collect();
            let h = m.embed(&refs).unwrap();
            assert_eq!(h.shape(), &[b, 8]);
            let z = m.project(&h).unwrap();
            assert_eq!(z.shape(), &[b, 4]);
            for i in 0..b {
                let n: f64 = z.item(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            assert_eq!(m.change_distance(&h, &h).unwrap().len(), b);
        }
        let wrong = random_images(1, 9, 0);
        assert!(matches!(m.embed(&[&wrong[0]]), Err(crate::Error::Config(_))));
    }

    #[test]
    fn embedding_is_deterministic_and_discriminative() {
        let m = ComFaceModel::<f32>::new(&tiny(), 5).unwrap();
        let imgs = random_images(2, 8, 9);
        let a = m.embed(&[&imgs[0], &imgs[0]]).unwrap();
        assert_eq!(a.item(0), a.item(1));
        let b = m.embed(&[&imgs[0], &imgs[1]]).unwrap();
        assert_ne!(b.item(0), b.item(1));
    }

    #[test]
    fn zero_projection_is_epsilon_guarded() {
        let mut m = ComFaceModel::<f64>::new(&tiny(), 1).unwrap();
        m.projection.output.weight.value.iter_mut().for_each(|v| *v = 0.0);
        m.projection.output.bias.value.iter_mut().for_each(|v| *v = 0.0);
        let z = m.project(&Tensor::from_vec(&[1, 8], vec![1.0; 8])).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn change_distance_examples() {
        let mut m = ComFaceModel::<f64>::new(&ModelConfig { backbone: BackboneConfig::plain(&[3]), ..tiny() }, 1).unwrap();
        m.change.linear.weight.value = vec![1.0; 3];
        m.change.linear.bias.value = vec![0.0];
        let hx = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.5]);
        assert_eq!(m.change_distance(&hx, &hx).unwrap(), vec![0.0]);
        let hy = Tensor::from_vec(&[1, 3], vec![1.5, -1.5, 3.5]);
        assert_eq!(m.change_distance(&hx, &hy).unwrap(), vec![4.0]);
    }

    #[test]
    fn change_distance_matches_scalar_evaluation() {
        let m = ComFaceModel::<f64>::new(&tiny(), 3).unwrap();
        let mut r = stream(4);
        let hx = Tensor::from_vec(&[6, 8], (0..48).map(|_| r.gen_range(-1.0..1.0)).collect());
        let hy = Tensor::from_vec(&[6, 8], (0..48).map(|_| r.gen_range(-1.0..1.0)).collect());
        let got = m.change_distance(&hx, &hy).unwrap();
        let w = &m.change.linear.weight.value;
        let b = m.change.linear.bias.value[0];
        for i in 0..6 {
            let mut d = b;
            for k in 0..8 {
                let diff = hy.item(i)[k] - hx.item(i)[k];
                if diff > 0.0 {
                    d += w[k] * diff;
                }
            }
            assert!((got[i] - d).abs() < 1e-12);
        }
    }

    #[test]
    fn change_distance_is_asymmetric_and_translation_invariant() {
        let m = ComFaceModel::<f64>::new(&tiny(), 8).unwrap();
        let mut r = stream(6);
        let hx = Tensor::from_vec(&[20, 8], (0..160).map(|_| r.gen_range(-1.0..1.0)).collect());
        let hy = Tensor::from_vec(&[20, 8], (0..160).map(|_| r.gen_range(-1.0..1.0)).collect());
        let fwd = m.change_distance(&hx, &hy).unwrap();
        let bwd = m.change_distance(&hy, &hx).unwrap();
        assert!(fwd.iter().zip(&bwd).all(|(a, b)| a != b));
        let shift: Vec<f64> = (0..8).map(|k| k as f64 * 0.37 - 1.0).collect();
        let add = |t: &Tensor<f64>| Tensor::from_vec(t.shape(), t.data().iter().enumerate().map(|(i, v)| v + shift[i % 8]).collect());
        let moved = m.change_distance(&add(&hx), &add(&hy)).unwrap();
        for (a, b) in fwd.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cast_preserves_parameters() {
        let m = ComFaceModel::<f32>::new(&tiny(), 2).unwrap();
        let back: ComFaceModel<f32> = m.cast::<f64>().cast();
        assert_eq!(m, back);
    }
}

//! Stochastic views for the contrastive and change branches: random resized
//! crop, horizontal flip, color jitter and grayscale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::image::{Image, Window, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    /// Range of the crop area as a fraction of the source area.
    pub crop_scale_range: (f64, f64),
    /// `[height, width]`.
    pub output_size: [usize; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            crop_scale_range: (0.5, 1.0),
            output_size: [64, 64],
        }
    }
}

impl AugmentPolicy {
    /// A policy that only resizes.
    pub fn identity(output_size: [usize; 2]) -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            crop_scale_range: (1.0, 1.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("jitter_prob", self.jitter_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} = {p} is not a probability"));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(config_err!("jitter_strength = {} outside [0, 1]", self.jitter_strength));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(config_err!("crop_scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if hi > 1.0 {
            return Err(config_err!("crop_scale_range upper bound {hi} exceeds the source image"));
        }
        if self.output_size.iter().any(|&s| s == 0) {
            return Err(config_err!("output_size must be positive"));
        }
        Ok(())
    }
}

/// ITU-R 601 luma.
#[inline]
fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Draws one augmented view of `image`. Deterministic in the state of `rng`.
pub fn augment<R: Rng + ?Sized>(image: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<Image> {
    policy.validate()?;
    if !image.in_unit_range() {
        return Err(config_err!("augment input must lie in [0, 1]"));
    }
    let (h, w) = (image.height() as f64, image.width() as f64);
    let (lo, hi) = policy.crop_scale_range;
    let area = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let side_y = libm::sqrt(area) * h;
    let side_x = libm::sqrt(area) * w;
    let top = if side_y < h { rng.gen_range(0.0..=(h - side_y)) } else { 0.0 };
    let left = if side_x < w { rng.gen_range(0.0..=(w - side_x)) } else { 0.0 };
    let window = Window { top, left, height: side_y, width: side_x };
    let [oh, ow] = policy.output_size;
    let mut out = if area == 1.0 { image.resized(oh, ow) } else { image.resample(window, oh, ow) };

    if policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob) {
        for c in 0..CHANNELS {
            for y in 0..oh {
                for x in 0..ow / 2 {
                    let (a, b) = (out.get(c, y, x), out.get(c, y, ow - 1 - x));
                    out.set(c, y, x, b);
                    out.set(c, y, ow - 1 - x, a);
                }
            }
        }
    }

    if policy.jitter_prob > 0.0 && rng.gen_bool(policy.jitter_prob) {
        let s = policy.jitter_strength;
        let factor = |rng: &mut R| if s > 0.0 { rng.gen_range((1.0 - s)..=(1.0 + s)) as f32 } else { 1.0 };
        let brightness = factor(rng);
        let contrast = factor(rng);
        let saturation = factor(rng);
        let plane = oh * ow;
        let data = out.data_mut();
        data.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
        let mean_luma = (0..plane).map(|p| luma(data[p], data[plane + p], data[2 * plane + p])).sum::<f32>() / plane as f32;
        data.iter_mut().for_each(|v| *v = ((*v - mean_luma) * contrast + mean_luma).clamp(0.0, 1.0));
        for p in 0..plane {
            let g = luma(data[p], data[plane + p], data[2 * plane + p]);
            for c in 0..CHANNELS {
                let v = &mut data[c * plane + p];
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }

    if policy.grayscale_prob > 0.0 && rng.gen_bool(policy.grayscale_prob) {
        to_grayscale(&mut out);
    }
    Ok(out)
}

pub fn to_grayscale(img: &mut Image) {
    let plane = img.height() * img.width();
    let data = img.data_mut();
    for p in 0..plane {
        let g = luma(data[p], data[plane + p], data[2 * plane + p]).clamp(0.0, 1.0);
        for c in 0..CHANNELS {
            data[c * plane + p] = g;
        }
    }
}

//! Three-channel images stored planar (channel, row, column) with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Axis-aligned source window in pixel units (may be fractional).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; CHANNELS * height * width] }
    }

    /// Builds from planar data; panics if the length does not match.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "planar buffer size");
        Self { height, width, data }
    }

    /// Builds from interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), CHANNELS * height * width, "rgb buffer size");
        let mut img = Self::zeros(height, width);
        let plane = height * width;
        for (p, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                img.data[c * plane + p] = f32::from(px[c]) / 255.0;
            }
        }
        img
    }

    /// Interleaved 8-bit RGB with round-to-nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * plane);
        for p in 0..plane {
            for c in 0..CHANNELS {
                out.push(quantize_u8(self.data[c * plane + p]));
            }
        }
        out
    }

    /// Snaps every value onto the 8-bit lattice, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| f32::from(quantize_u8(v)) / 255.0).collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn full_window(&self) -> Window {
        Window { top: 0.0, left: 0.0, height: self.height as f64, width: self.width as f64 }
    }

    /// Bilinear resampling of `window` to `out_h x out_w` using pixel-center
    /// alignment; resampling the full window at the source size is the identity.
    pub fn resample(&self, window: Window, out_h: usize, out_w: usize) -> Self {
        let mut out = Self::zeros(out_h, out_w);
        let sy = window.height / out_h as f64;
        let sx = window.width / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let taps_x: Vec<(usize, usize, f32)> = (0..out_w)
            .map(|x| {
                let fx = (window.left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = libm::floor(fx) as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                (x0, x1, (fx - x0 as f64) as f32)
            })
            .collect();
        for y in 0..out_h {
            let fy = (window.top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = libm::floor(fy) as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for c in 0..CHANNELS {
                for (x, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let v = if wy == 0.0 && wx == 0.0 {
                        self.get(c, y0, x0)
                    } else {
                        let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                        let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                        top * (1.0 - wy) + bot * wy
                    };
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resample(self.full_window(), out_h, out_w)
    }
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..CHANNELS * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::from_planar(h, w, data)
    }

    #[test]
    fn full_window_resample_is_identity() {
        let img = ramp(7, 9);
        assert_eq!(img.resample(img.full_window(), 7, 9), img);
    }

    #[test]
    fn rgb8_round_trip_is_within_quantization() {
        let img = ramp(4, 5);
        let back = Image::from_rgb8(4, 5, &img.to_rgb8());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let img = Image::from_planar(8, 8, vec![0.25; 3 * 64]);
        let small = img.resized(3, 5);
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}

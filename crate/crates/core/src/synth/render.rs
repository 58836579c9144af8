//! Procedural rasterizer: layered soft-edged ellipses and strokes in normalized
//! coordinates `u, v in [-1, 1]` (v grows downward), modulated by smooth value
//! noise seeded per identity.

use alloc::vec::Vec;

use rand::Rng;

use super::{edit, sample_identity, AttributeCatalog, EditSpec, LATENT_LIMIT, PARAM_DIM};
use crate::error::{config_err, Result};
use crate::image::Image;
use crate::rng;
use super::param::*;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFace {
    pub pixels: Image,
    pub spec: EditSpec,
}

/// Renders the identity and edit described by `spec`.
pub fn render_edit(catalog: &AttributeCatalog, spec: &EditSpec, height: usize, width: usize) -> Result<RenderedFace> {
    let latent = sample_identity(spec.identity_seed, PARAM_DIM);
    let attr = catalog.get(&spec.attribute)?;
    let params = edit(&latent, attr, spec.alpha)?;
    let pixels = render(&params, height, width, latent.texture_seed())?;
    Ok(RenderedFace { pixels, spec: spec.clone() })
}

type Rgb = [f64; 3];

struct Face {
    rx: f64,
    ry: f64,
    cy: f64,
    eye_spacing: f64,
    eye_size: f64,
    eye_y: f64,
    nose: f64,
    mouth_curve: f64,
    mouth_width: f64,
    brow_height: f64,
    brow_droop: f64,
    wrinkles: f64,
    skin: Rgb,
    hair: Rgb,
    hairline: f64,
    backdrop: f64,
}

impl Face {
    fn from_params(p: &[f64]) -> Self {
        let phys = |k: usize, lo: f64, hi: f64| {
            let t = p[k].clamp(-LATENT_LIMIT, LATENT_LIMIT) / LATENT_LIMIT;
            lo + 0.5 * (t + 1.0) * (hi - lo)
        };
        let tone = phys(SKIN_TONE, 0.35, 0.92);
        let warmth = phys(SKIN_WARMTH, 0.0, 1.0);
        let hair = phys(HAIR_SHADE, 0.05, 0.55);
        Self {
            rx: phys(FACE_WIDTH, 0.40, 0.82),
            ry: phys(FACE_LENGTH, 0.58, 0.88),
            cy: 0.06,
            eye_spacing: phys(EYE_SPACING, 0.20, 0.34),
            eye_size: phys(EYE_SIZE, 0.045, 0.12),
            eye_y: phys(EYE_LINE, -0.20, -0.04),
            nose: phys(NOSE_SIZE, 0.03, 0.17),
            mouth_curve: phys(MOUTH_CURVE, -0.20, 0.24),
            mouth_width: phys(MOUTH_WIDTH, 0.10, 0.34),
            brow_height: phys(BROW_HEIGHT, 0.06, 0.20),
            brow_droop: phys(BROW_DROOP, -0.08, 0.16),
            wrinkles: phys(WRINKLES, -0.6, 1.6).clamp(0.0, 1.2),
            skin: [tone, tone * (0.82 - 0.10 * warmth), tone * (0.70 - 0.18 * warmth)],
            hair: [hair * 0.9, hair * 0.7, hair * 0.5],
            hairline: phys(HAIRLINE, -0.78, -0.35),
            backdrop: phys(BACKDROP, 0.25, 0.85),
        }
    }
}

/// Smooth value noise on a coarse lattice.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(seed: u64, cells: usize) -> Self {
        let mut s = rng::derived_stream(seed, "value-noise", &[cells as u64]);
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| s.gen_range(-1.0..1.0)).collect();
        Self { cells, lattice }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells as f64;
        let fx = ((u + 1.0) * 0.5 * n).clamp(0.0, n - 1e-9);
        let fy = ((v + 1.0) * 0.5 * n).clamp(0.0, n - 1e-9);
        let (x0, y0) = (libm::floor(fx) as usize, libm::floor(fy) as usize);
        let (tx, ty) = (smooth01(fx - x0 as f64), smooth01(fy - y0 as f64));
        let w = self.cells + 1;
        let l = |x: usize, y: usize| self.lattice[y * w + x];
        let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
        let bot = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn smooth01(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of a shape with signed distance `sd` (negative inside) for an
/// antialiasing half-width `aa`.
#[inline]
fn cover(sd: f64, aa: f64) -> f64 {
    smooth01((0.5 - sd / (2.0 * aa)).clamp(0.0, 1.0))
}

/// Approximate signed distance to an axis-aligned ellipse.
#[inline]
fn ellipse_sd(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (du, dv) = ((u - cx) / rx, (v - cy) / ry);
    (libm::sqrt(du * du + dv * dv) - 1.0) * rx.min(ry)
}

#[inline]
fn segment_distance(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (u - a.0, v - a.1);
    let t = ((px * bx + py * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    let (dx, dy) = (px - t * bx, py - t * by);
    libm::sqrt(dx * dx + dy * dy)
}

#[inline]
fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

#[inline]
fn scale(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Rasterizes a parameter vector. Components are clamped to the legal latent
/// range here and nowhere else.
pub fn render(params: &[f64], height: usize, width: usize, texture_seed: u64) -> Result<Image> {
    if params.len() != PARAM_DIM {
        return Err(config_err!("render expects {PARAM_DIM} parameters, got {}", params.len()));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(config_err!("parameter {i} is not finite"));
    }
    if height == 0 || width == 0 {
        return Err(config_err!("render size must be positive"));
    }
    let f = Face::from_params(params);
    let coarse = ValueNoise::new(texture_seed, 6);
    let fine = ValueNoise::new(texture_seed, 23);
    let aa = 1.0 / height.min(width) as f64;
    let mut img = Image::zeros(height, width);

    let mouth_y = f.cy + 0.55 * f.ry;
    let nose_y = f.eye_y + 0.10 + 1.4 * f.nose;
    let lip = [0.62, 0.22, 0.24];
    let dark = [0.08, 0.05, 0.04];

    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;

            let b = f.backdrop * (1.0 - 0.15 * v);
            let mut c: Rgb = [0.55 * b, 0.72 * b, b];

            // hair behind the head
            let hair_sd = ellipse_sd(u, v, 0.0, f.cy - 0.06, f.rx + 0.09, f.ry + 0.08);
            let hair_mask = cover(hair_sd, aa) * cover(v - (f.cy + 0.15), 3.0 * aa);
            c = mix(c, f.hair, hair_mask);

            // face
            let face_sd = ellipse_sd(u, v, 0.0, f.cy, f.rx, f.ry);
            let face_mask = cover(face_sd, aa);
            if face_mask > 0.0 {
                let ru = u / f.rx;
                let rv = (v - f.cy) / f.ry;
                let shade = 1.0 - 0.22 * (ru * ru + rv * rv).min(1.0);
                let mut skin = scale(f.skin, shade * (1.0 + 0.06 * coarse.at(u, v)));

                // forehead lines, crow's feet and nasolabial folds scale with age
                if f.wrinkles > 0.0 {
                    let band = cover(f.hairline + 0.04 - v, 2.0 * aa) * cover(v - (f.eye_y - f.brow_height - 0.04), 2.0 * aa);
                    let phase = (v * 22.0 + 0.6 * fine.at(u, v)) * core::f64::consts::PI;
                    let line = libm::pow(libm::cos(phase).abs(), 6.0);
                    let mut crease = band * line * (1.0 - 0.7 * ru.abs());
                    for s in [-1.0, 1.0] {
                        let a = (s * 0.9 * f.nose, nose_y);
                        let e = (s * (f.mouth_width + 0.05), mouth_y + 0.02);
                        crease += cover(segment_distance(u, v, a, e) - 0.016, aa);
                        let corner = (s * (f.eye_spacing + 1.6 * f.eye_size), f.eye_y);
                        for k in [-1.0, 0.0, 1.0] {
                            let tip = (corner.0 + s * 0.09, corner.1 + k * 0.06);
                            crease += 0.8 * cover(segment_distance(u, v, corner, tip) - 0.010, aa);
                        }
                    }
                    skin = scale(skin, 1.0 - 0.45 * f.wrinkles * crease.min(1.0));
                }

                // nose shading and nostrils
                let bridge = cover(ellipse_sd(u, v, 0.0, nose_y - 0.6 * f.nose, 0.55 * f.nose, 1.8 * f.nose), 2.0 * aa);
                skin = scale(skin, 1.0 - 0.18 * bridge);
                for s in [-1.0, 1.0] {
                    let nostril = cover(ellipse_sd(u, v, s * 0.45 * f.nose, nose_y + 0.3 * f.nose, 0.32 * f.nose, 0.18 * f.nose), aa);
                    skin = mix(skin, scale(f.skin, 0.35), nostril);
                }

                // eyes and brows
                for s in [-1.0, 1.0] {
                    let ex = s * f.eye_spacing;
                    let sclera = cover(ellipse_sd(u, v, ex, f.eye_y, 1.4 * f.eye_size, 0.75 * f.eye_size), aa);
                    skin = mix(skin, [0.95, 0.95, 0.92], sclera);
                    let iris = cover(ellipse_sd(u, v, ex, f.eye_y, 0.55 * f.eye_size, 0.55 * f.eye_size), aa) * sclera;
                    skin = mix(skin, [0.28, 0.18, 0.10], iris);
                    let pupil = cover(ellipse_sd(u, v, ex, f.eye_y, 0.24 * f.eye_size, 0.24 * f.eye_size), aa) * sclera;
                    skin = mix(skin, dark, pupil);

                    let inner = (ex - s * 1.2 * f.eye_size, f.eye_y - f.brow_height);
                    let outer = (ex + s * 1.7 * f.eye_size, f.eye_y - f.brow_height + f.brow_droop);
                    let brow = cover(segment_distance(u, v, inner, outer) - 0.022, aa);
                    skin = mix(skin, scale(f.hair, 0.8), brow);
                }

                // mouth: parabola through the corners, corners rise with a smile
                let t = u / f.mouth_width;
                let curve_y = mouth_y - f.mouth_curve * (t * t - 0.35);
                let slope = 2.0 * f.mouth_curve * t / f.mouth_width;
                let dist = (v - curve_y).abs() / libm::sqrt(1.0 + slope * slope);
                let ends = cover(t.abs() - 1.0, 2.0 * aa / f.mouth_width);
                let mouth = cover(dist - 0.026, aa) * ends;
                skin = mix(skin, scale(lip, f.skin[0] * 1.1), mouth);

                // fringe over the forehead
                let fringe = cover(v - f.hairline, 2.0 * aa);
                skin = mix(skin, f.hair, fringe);

                c = mix(c, skin, face_mask);
            }

            let grain = 1.0 + 0.03 * fine.at(u, v);
            for (ch, &val) in c.iter().enumerate() {
                img.set(ch, y, x, (val * grain).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{alpha_grid, AttributeCatalog};
    use alloc::string::ToString;

    fn spec(seed: u64, attr: &str, alpha: f64) -> EditSpec {
        EditSpec { identity_seed: seed, attribute: attr.to_string(), alpha }
    }

    #[test]
    fn render_is_deterministic() {
        let cat = AttributeCatalog::builtin();
        let a = render_edit(&cat, &spec(4, "age", 2.3), 32, 32).unwrap();
        let b = render_edit(&cat, &spec(4, "age", 2.3), 32, 32).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
    }

    #[test]
    fn mean_pixel_strictly_inside_unit_interval() {
        let cat = AttributeCatalog::builtin();
        for seed in 0..12u64 {
            for attr in cat.names() {
                for alpha in [-5.0, 0.0, 5.0] {
                    let img = render_edit(&cat, &spec(seed, &attr, alpha), 24, 24).unwrap().pixels;
                    assert!(img.in_unit_range());
                    let m = img.mean();
                    assert!(m > 0.0 && m < 1.0, "{seed} {attr} {alpha}: {m}");
                }
            }
        }
    }

    #[test]
    fn each_attribute_changes_the_image() {
        let cat = AttributeCatalog::builtin();
        for attr in cat.names() {
            let lo = render_edit(&cat, &spec(1, &attr, -5.0), 48, 48).unwrap().pixels;
            let hi = render_edit(&cat, &spec(1, &attr, 5.0), 48, 48).unwrap().pixels;
            let diff: f64 = lo.data().iter().zip(hi.data()).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>()
                / lo.data().len() as f64;
            assert!(diff > 0.0015, "{attr}: mean abs diff {diff}");
        }
    }

    #[test]
    fn renders_are_continuous_along_the_grid() {
        // Adjacent grid steps should change the image less than the extremes do.
        let cat = AttributeCatalog::builtin();
        let g = alpha_grid(0.1).unwrap();
        let at = |a: f64| render_edit(&cat, &spec(2, "weight", a), 48, 48).unwrap().pixels;
        let d = |x: &Image, y: &Image| x.data().iter().zip(y.data()).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>();
        let step = d(&at(g[50]), &at(g[51]));
        let span = d(&at(g[0]), &at(g[100]));
        assert!(step > 0.0 && step < span / 20.0, "step {step} span {span}");
    }

    #[test]
    fn out_of_range_params_are_clamped_not_rejected() {
        let mut p = alloc::vec![0.0; PARAM_DIM];
        p[FACE_WIDTH] = 100.0;
        let img = render(&p, 16, 16, 0).unwrap();
        assert!(img.in_unit_range());
        p[0] = f64::NAN;
        assert!(render(&p, 16, 16, 0).is_err());
    }
}

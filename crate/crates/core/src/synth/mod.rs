//! Procedural identities and attribute edits.
//!
//! An identity is a parameter vector in a normalized latent space: each base
//! component lies in `[-BASE_RANGE, BASE_RANGE]`. An attribute is a unit
//! direction in that space and an edit moves the latent along it,
//! `params + alpha * direction`. Edits are exact on the vector; clamping to
//! `[-LATENT_LIMIT, LATENT_LIMIT]` only happens inside the renderer.

mod manifest;
mod render;

pub use manifest::{DatasetManifest, FileLayout, ReferenceScale, MANIFEST_VERSION};
pub use render::{render, render_edit, RenderedFace};

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng;

/// Dimension of the face parameter space.
pub const PARAM_DIM: usize = 16;
/// Base identity components are drawn uniformly from `[-BASE_RANGE, BASE_RANGE]`.
pub const BASE_RANGE: f64 = 2.0;
/// Largest edit intensity magnitude.
pub const ALPHA_LIMIT: f64 = 5.0;
/// Renderer clamp; any base latent edited by a unit direction with
/// `|alpha| <= ALPHA_LIMIT` stays inside it.
pub const LATENT_LIMIT: f64 = BASE_RANGE + ALPHA_LIMIT;

/// Meaning of each latent component.
pub mod param {
    pub const FACE_WIDTH: usize = 0;
    pub const FACE_LENGTH: usize = 1;
    pub const EYE_SPACING: usize = 2;
    pub const EYE_SIZE: usize = 3;
    pub const NOSE_SIZE: usize = 4;
    pub const MOUTH_CURVE: usize = 5;
    pub const MOUTH_WIDTH: usize = 6;
    pub const BROW_HEIGHT: usize = 7;
    pub const BROW_DROOP: usize = 8;
    pub const WRINKLES: usize = 9;
    pub const SKIN_TONE: usize = 10;
    pub const SKIN_WARMTH: usize = 11;
    pub const HAIR_SHADE: usize = 12;
    pub const HAIRLINE: usize = 13;
    pub const BACKDROP: usize = 14;
    pub const EYE_LINE: usize = 15;
}

/// The latent code of one synthetic person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent {
    pub seed: u64,
    pub params: Vec<f64>,
}

impl IdentityLatent {
    /// Seed of the per-identity texture noise, fixed across all edits.
    pub fn texture_seed(&self) -> u64 {
        rng::derive(self.seed, "texture", &[])
    }
}

/// Draws the base parameters of identity `seed`. Pure in `seed`.
pub fn sample_identity(seed: u64, dim: usize) -> IdentityLatent {
    let mut stream = rng::derived_stream(seed, "identity", &[]);
    let params = (0..dim).map(|_| stream.gen_range(-BASE_RANGE..=BASE_RANGE)).collect();
    IdentityLatent { seed, params }
}

/// A named unit direction in the parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDirection {
    pub name: String,
    pub direction: Vec<f64>,
}

impl AttributeDirection {
    /// Normalizes `weights` (pairs of component index and weight) into a unit vector.
    pub fn from_weights(name: &str, dim: usize, weights: &[(usize, f64)]) -> Result<Self> {
        let mut direction = alloc::vec![0.0; dim];
        for &(i, w) in weights {
            if i >= dim {
                return Err(config_err!("attribute {name}: component {i} outside dimension {dim}"));
            }
            direction[i] += w;
        }
        let norm = libm::sqrt(direction.iter().map(|v| v * v).sum::<f64>());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(config_err!("attribute {name}: zero direction"));
        }
        direction.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { name: name.to_string(), direction })
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }
}

/// An ordered set of attribute directions with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeCatalog {
    attributes: Vec<AttributeDirection>,
}

impl AttributeCatalog {
    pub fn new(attributes: Vec<AttributeDirection>) -> Result<Self> {
        let dim = attributes.first().map_or(PARAM_DIM, AttributeDirection::dim);
        for (i, a) in attributes.iter().enumerate() {
            if a.dim() != dim {
                return Err(config_err!("attribute {} has dimension {}, expected {dim}", a.name, a.dim()));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(config_err!("duplicate attribute name {}", a.name));
            }
        }
        Ok(Self { attributes })
    }

    /// weight, age and smile plus five auxiliary single-feature attributes.
    pub fn builtin() -> Self {
        use param::*;
        let d = PARAM_DIM;
        let attrs = [
            ("weight", &[(FACE_WIDTH, 1.0)][..]),
            ("age", &[(WRINKLES, 1.0), (BROW_DROOP, 1.0)][..]),
            ("smile", &[(MOUTH_CURVE, 1.0), (MOUTH_WIDTH, 0.5)][..]),
            ("eye_size", &[(EYE_SIZE, 1.0)][..]),
            ("nose_size", &[(NOSE_SIZE, 1.0)][..]),
            ("brow_height", &[(BROW_HEIGHT, 1.0)][..]),
            ("skin_tone", &[(SKIN_TONE, 1.0)][..]),
            ("face_length", &[(FACE_LENGTH, 1.0)][..]),
        ];
        let attributes = attrs
            .iter()
            .map(|(name, w)| AttributeDirection::from_weights(name, d, w).expect("builtin direction"))
            .collect();
        Self { attributes }
    }

    /// The builtin attributes restricted to `names`, in the given order.
    pub fn builtin_subset<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let all = Self::builtin();
        let attributes = names
            .iter()
            .map(|n| all.get(n.as_ref()).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::new(attributes)
    }

    pub fn get(&self, name: &str) -> Result<&AttributeDirection> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| config_err!("unknown attribute {name}"))
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttributeDirection> {
        self.attributes.iter()
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

/// One image of the dataset: identity, edited attribute and intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub identity_seed: u64,
    pub attribute: String,
    pub alpha: f64,
}

impl EditSpec {
    pub fn alpha_millis(&self) -> i64 {
        alpha_to_millis(self.alpha)
    }
}

/// `latent.params + alpha * attr.direction`, exact (no clamping).
pub fn edit(latent: &IdentityLatent, attr: &AttributeDirection, alpha: f64) -> Result<Vec<f64>> {
    edit_params(&latent.params, attr, alpha)
}

/// [`edit`] on a raw parameter vector, so edits compose.
pub fn edit_params(params: &[f64], attr: &AttributeDirection, alpha: f64) -> Result<Vec<f64>> {
    if params.len() != attr.dim() {
        return Err(config_err!(
            "attribute {} has dimension {}, latent has {}",
            attr.name,
            attr.dim(),
            params.len()
        ));
    }
    if !alpha.is_finite() || alpha.abs() > ALPHA_LIMIT + 1e-9 {
        return Err(config_err!("alpha {alpha} outside [-{ALPHA_LIMIT}, {ALPHA_LIMIT}]"));
    }
    Ok(params.iter().zip(&attr.direction).map(|(p, d)| p + alpha * d).collect())
}

pub fn alpha_to_millis(alpha: f64) -> i64 {
    libm::round(alpha * 1000.0) as i64
}

pub fn millis_to_alpha(millis: i64) -> f64 {
    millis as f64 / 1000.0
}

/// The symmetric grid `-5, -5 + step, ..., 5`. `step` must divide 5 into whole
/// thousandths.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    let step_m = alpha_to_millis(step);
    let limit_m = alpha_to_millis(ALPHA_LIMIT);
    if step_m <= 0 || (step - millis_to_alpha(step_m)).abs() > 1e-9 {
        return Err(config_err!("grid step {step} must be a positive multiple of 0.001"));
    }
    if limit_m % step_m != 0 {
        return Err(config_err!("grid step {step} does not divide {ALPHA_LIMIT}"));
    }
    Ok((-limit_m..=limit_m).step_by(step_m as usize).map(millis_to_alpha).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_pure_in_seed() {
        assert_eq!(sample_identity(7, 16), sample_identity(7, 16));
        assert_ne!(sample_identity(7, 16).params, sample_identity(8, 16).params);
    }

    #[test]
    fn identity_params_in_range() {
        let id = sample_identity(0, 16);
        assert!(id.params.iter().all(|p| p.abs() <= BASE_RANGE));
    }

    #[test]
    fn no_collisions_over_many_seeds() {
        let mut all: Vec<Vec<u64>> = (0..1000u64)
            .map(|s| sample_identity(s, PARAM_DIM).params.iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn builtin_catalog_is_unit_and_unique() {
        let cat = AttributeCatalog::builtin();
        assert_eq!(cat.len(), 8);
        for a in cat.iter() {
            let n: f64 = a.direction.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12, "{}", a.name);
        }
        let dup = AttributeCatalog::new(alloc::vec![cat.get("age").unwrap().clone(), cat.get("age").unwrap().clone()]);
        assert!(matches!(dup, Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_alpha_is_identity_edit() {
        let id = sample_identity(3, PARAM_DIM);
        let cat = AttributeCatalog::builtin();
        assert_eq!(edit(&id, cat.get("smile").unwrap(), 0.0).unwrap(), id.params);
    }

    #[test]
    fn edit_rejects_dimension_mismatch_and_large_alpha() {
        let id = sample_identity(3, 4);
        let cat = AttributeCatalog::builtin();
        assert!(matches!(edit(&id, cat.get("smile").unwrap(), 1.0), Err(crate::Error::Config(_))));
        let id = sample_identity(3, PARAM_DIM);
        assert!(edit(&id, cat.get("smile").unwrap(), 5.5).is_err());
    }

    #[test]
    fn smile_extremes_differ_by_ten_direction_components() {
        let id = sample_identity(11, PARAM_DIM);
        let smile = AttributeCatalog::builtin().get("smile").unwrap().clone();
        let hi = edit(&id, &smile, 5.0).unwrap();
        let lo = edit(&id, &smile, -5.0).unwrap();
        let k = param::MOUTH_CURVE;
        assert!((hi[k] - lo[k] - 10.0 * smile.direction[k]).abs() < 1e-12);
    }

    #[test]
    fn grid_has_101_points_at_tenth_step() {
        let g = alpha_grid(0.1).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[100], 5.0);
        assert_eq!(g[50], 0.0);
        assert_eq!(g[1], -4.9);
        assert!(g.windows(2).all(|w| alpha_to_millis(w[1] - w[0]) == 100));
        assert!(alpha_grid(0.3).is_err());
        assert!(alpha_grid(0.0).is_err());
    }
}

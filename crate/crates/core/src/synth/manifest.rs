use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{alpha_grid, alpha_to_millis, AttributeCatalog, EditSpec};
use crate::config::GenerationConfig;
use crate::error::{config_err, Result};
use crate::rng;

pub const MANIFEST_VERSION: &str = "comface.dataset/1";

/// Where images live relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileLayout {
    /// `{seed}`, `{attr}` and `{alpha_millis}` are substituted per entry.
    pub pattern: String,
    /// `false` when entries are rendered on demand instead of read from disk.
    pub materialized: bool,
}

impl Default for FileLayout {
    fn default() -> Self {
        Self { pattern: String::from("identities/{seed}/{attr}/{alpha_millis}.png"), materialized: true }
    }
}

/// Dataset composition reported for the full-size synthetic corpus. Recorded
/// for reference only; nothing is generated at this size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScale {
    pub identities: u64,
    pub attributes: u64,
    pub total_images: u64,
}

impl Default for ReferenceScale {
    fn default() -> Self {
        Self { identities: 250_000, attributes: 43, total_images: 35_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    /// `[height, width]`.
    pub render_size: [usize; 2],
    pub attribute_catalog: Vec<String>,
    pub identities: Vec<u64>,
    pub alpha_grid: Vec<f64>,
    pub file_layout: FileLayout,
    pub seed: u64,
    pub reference_scale: ReferenceScale,
}

impl DatasetManifest {
    /// The manifest a generation config describes. Identity seeds are a prefix-stable
    /// sequence derived from `seed`, so a larger dataset extends a smaller one.
    pub fn from_config(config: &GenerationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let identities = (0..config.identities as u64).map(|i| rng::derive(seed, "identity-pool", &[i])).collect();
        Ok(Self {
            version: String::from(MANIFEST_VERSION),
            render_size: [config.size, config.size],
            attribute_catalog: config.attributes.clone(),
            identities,
            alpha_grid: alpha_grid(config.grid_step)?,
            file_layout: FileLayout { materialized: config.materialize, ..FileLayout::default() },
            seed,
            reference_scale: ReferenceScale::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(config_err!("unsupported manifest version {:?}", self.version));
        }
        if self.attribute_catalog.is_empty() {
            return Err(config_err!("manifest has no attributes"));
        }
        AttributeCatalog::builtin_subset(&self.attribute_catalog)?;
        if self.alpha_grid.len() < 2 {
            return Err(config_err!("alpha grid needs at least two points"));
        }
        if self.alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("alpha grid must be strictly increasing"));
        }
        if self.identities.is_empty() {
            return Err(config_err!("manifest has no identities"));
        }
        if self.render_size.iter().any(|&s| s == 0) {
            return Err(config_err!("render size must be positive"));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Result<AttributeCatalog> {
        AttributeCatalog::builtin_subset(&self.attribute_catalog)
    }

    pub fn entry_count(&self) -> u64 {
        (self.identities.len() * self.attribute_catalog.len() * self.alpha_grid.len()) as u64
    }

    /// Every (identity, attribute, alpha) triple, identity-major.
    pub fn entries(&self) -> impl Iterator<Item = EditSpec> + '_ {
        self.identities.iter().flat_map(move |&seed| {
            self.attribute_catalog.iter().flat_map(move |attr| {
                self.alpha_grid.iter().map(move |&alpha| EditSpec { identity_seed: seed, attribute: attr.clone(), alpha })
            })
        })
    }

    pub fn contains(&self, spec: &EditSpec) -> bool {
        let m = spec.alpha_millis();
        self.identities.contains(&spec.identity_seed)
            && self.attribute_catalog.iter().any(|a| *a == spec.attribute)
            && self.alpha_grid.iter().any(|&a| alpha_to_millis(a) == m)
    }

    /// Relative image path for `spec`, with alpha written as signed thousandths.
    pub fn relative_path(&self, spec: &EditSpec) -> String {
        self.file_layout
            .pattern
            .replace("{seed}", &format!("{}", spec.identity_seed))
            .replace("{attr}", &spec.attribute)
            .replace("{alpha_millis}", &format!("{}", spec.alpha_millis()))
    }

    /// A copy restricted to `identities` (which must be a subset).
    pub fn with_identities(&self, identities: Vec<u64>) -> Self {
        Self { identities, ..self.clone() }
    }
}

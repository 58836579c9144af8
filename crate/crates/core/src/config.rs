//! Experiment configuration. Every section has serde defaults, so a config file
//! only needs the keys it changes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::curriculum::{CurriculumSchedule, PairSampling};
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::synth::{alpha_grid, AttributeCatalog};

/// What `gen` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub identities: usize,
    /// Attributes seen during pretraining.
    pub attributes: Vec<String>,
    pub grid_step: f64,
    /// Square render size in pixels.
    pub size: usize,
    /// Write PNGs; otherwise entries are rendered on demand.
    pub materialize: bool,
    /// Downstream task along an attribute absent from pretraining.
    pub task: Option<TaskGeneration>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let attributes = AttributeCatalog::builtin().names().into_iter().filter(|n| n != "weight").collect();
        Self { identities: 500, attributes, grid_step: 0.1, size: 64, materialize: true, task: Some(TaskGeneration::default()) }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(config_err!("generation needs at least one identity"));
        }
        if self.attributes.is_empty() {
            return Err(config_err!("generation needs at least one attribute"));
        }
        AttributeCatalog::builtin_subset(&self.attributes)?;
        if alpha_grid(self.grid_step)?.len() < 2 {
            return Err(config_err!("alpha grid needs at least two points"));
        }
        if self.size < 8 {
            return Err(config_err!("render size {} is below the 8 pixel minimum", self.size));
        }
        if let Some(task) = &self.task {
            task.validate()?;
            if self.attributes.contains(&task.attribute) {
                return Err(config_err!("task attribute {} must be held out of pretraining", task.attribute));
            }
        }
        Ok(())
    }
}

/// Synthetic downstream task: unseen identities rendered along one attribute,
/// labelled with alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGeneration {
    pub attribute: String,
    pub subjects: usize,
    pub grid_step: f64,
    /// Capture differences applied independently to every task image.
    pub session: Option<SessionVariation>,
}

impl Default for TaskGeneration {
    fn default() -> Self {
        Self { attribute: "weight".to_string(), subjects: 32, grid_step: 1.0, session: Some(SessionVariation::default()) }
    }
}

/// Framing, zoom, lighting and mirroring that differ between photos of one
/// subject taken on different occasions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionVariation {
    /// Crop area range as a fraction of the frame.
    pub crop_scale_range: (f64, f64),
    /// Brightness, contrast and saturation factors in `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    pub flip_prob: f64,
}

impl Default for SessionVariation {
    fn default() -> Self {
        Self { crop_scale_range: (0.6, 1.0), jitter_strength: 0.3, flip_prob: 0.5 }
    }
}

impl SessionVariation {
    pub fn policy(&self, size: usize) -> AugmentPolicy {
        AugmentPolicy {
            flip_prob: self.flip_prob,
            jitter_prob: if self.jitter_strength > 0.0 { 1.0 } else { 0.0 },
            jitter_strength: self.jitter_strength,
            grayscale_prob: 0.0,
            crop_scale_range: self.crop_scale_range,
            output_size: [size, size],
        }
    }
}

impl TaskGeneration {
    pub fn validate(&self) -> Result<()> {
        AttributeCatalog::builtin_subset(&[&self.attribute])?;
        if self.subjects < 2 {
            return Err(config_err!("task needs at least two subjects"));
        }
        alpha_grid(self.grid_step)?;
        if let Some(v) = &self.session {
            v.policy(8).validate()?;
        }
        Ok(())
    }
}

/// Target used by the intra-personal regression during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraTarget {
    /// `|alpha_y - alpha_x|`
    #[default]
    Absolute,
    /// `alpha_y - alpha_x`
    Signed,
}

/// Which loss terms enter `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub inter: bool,
    pub intra: bool,
    pub intra_target: IntraTarget,
}

impl Default for Objective {
    fn default() -> Self {
        Self { inter: true, intra: true, intra_target: IntraTarget::Absolute }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub temperature: f64,
    pub learning_rate: f64,
    /// The rate is halved for every epoch after this one.
    pub lr_halving_epoch: u32,
    pub identity_split_fraction: f64,
    /// Training pairs drawn per training identity per epoch; sets the epoch length.
    pub pairs_per_identity: usize,
    /// Held-out pairs scored at the end of each epoch.
    pub validation_pairs: usize,
    pub schedule: CurriculumSchedule,
    pub sampling: PairSampling,
    pub objective: Objective,
    pub policy: AugmentPolicy,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 12,
            temperature: 0.1,
            learning_rate: 4e-4,
            lr_halving_epoch: 10,
            identity_split_fraction: 0.9,
            pairs_per_identity: 4,
            validation_pairs: 128,
            schedule: CurriculumSchedule::default(),
            sampling: PairSampling::default(),
            objective: Objective::default(),
            policy: AugmentPolicy::default(),
            model: ModelConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.pairs_per_identity == 0 || self.validation_pairs == 0 {
            return Err(config_err!("batch_size, epochs, pairs_per_identity and validation_pairs must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(config_err!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.identity_split_fraction > 0.0 && self.identity_split_fraction < 1.0) {
            return Err(config_err!("identity_split_fraction must lie in (0, 1)"));
        }
        if !self.objective.inter && !self.objective.intra {
            return Err(config_err!("objective must enable at least one loss term"));
        }
        self.schedule.validate()?;
        if self.epochs > self.schedule.last_epoch() {
            return Err(config_err!(
                "{} epochs exceed the curriculum, which ends at epoch {}",
                self.epochs,
                self.schedule.last_epoch()
            ));
        }
        self.policy.validate()?;
        self.model.validate()?;
        if self.policy.output_size != self.model.input_size {
            return Err(config_err!(
                "augmentation output {:?} differs from model input {:?}",
                self.policy.output_size,
                self.model.input_size
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: u32) -> f64 {
        if epoch > self.lr_halving_epoch {
            self.learning_rate * 0.5
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub folds: usize,
    pub val_fraction: f64,
    pub train_pairs_per_subject: usize,
    pub test_pairs_cap: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            val_fraction: 0.1,
            train_pairs_per_subject: 20,
            test_pairs_cap: 50,
            learning_rate: 1e-4,
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(config_err!("need at least two folds"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!("val_fraction must lie in [0, 1)"));
        }
        if self.train_pairs_per_subject == 0 || self.test_pairs_cap == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("pair counts, batch size and max_epochs must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err!("transfer learning rate must be positive"));
        }
        Ok(())
    }
}

/// One fully-resolved run: data, pretraining and transfer settings plus the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generation: GenerationConfig,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generation: GenerationConfig::default(),
            pretrain: PretrainConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.pretrain.validate()?;
        self.transfer.validate()?;
        let size = [self.generation.size, self.generation.size];
        if size != self.pretrain.model.input_size {
            return Err(config_err!("render size {:?} differs from model input {:?}", size, self.pretrain.model.input_size));
        }
        let grid = alpha_grid(self.generation.grid_step)?;
        let step = grid[1] - grid[0];
        let smallest = self.pretrain.schedule.s_max / self.pretrain.schedule.stage_count() as f64;
        if step > smallest + 1e-9 {
            return Err(config_err!("grid step {step} exceeds the smallest curriculum range {smallest}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn learning_rate_halves_once() {
        let p = PretrainConfig::default();
        for e in 1..=10 {
            assert_eq!(p.learning_rate_at(e), 4e-4);
        }
        assert_eq!(p.learning_rate_at(11), 2e-4);
        assert_eq!(p.learning_rate_at(12), 2e-4);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        c.pretrain.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.pretrain.epochs = 13;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.generation.attributes.push("weight".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.generation.size = 32;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.pretrain.objective = Objective { inter: false, intra: false, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

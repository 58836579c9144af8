//! One optimization step on `L = L_inter + L_intra`, epoch iteration and
//! held-out validation. Clock and file output are supplied by the caller.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy};
use crate::config::{IntraTarget, Objective, PretrainConfig};
use crate::curriculum::{build_batch_at, current_range, FacePair, PairSampler};
use crate::error::{config_err, contract_err, Error, Result};
use crate::image::Image;
use crate::losses::{combined_loss, info_nce_with_grad, intra_mse_with_grad, task_mse_with_grad};
use crate::model::ComFaceModel;
use crate::nn::Module;
use crate::optim::{self, Adam};
use crate::real::Real;
use crate::rng;
use crate::synth::{render_edit, AttributeCatalog, DatasetManifest, EditSpec};
use crate::tensor::Tensor;

/// Supplies the pixels of a manifest entry.
pub trait ImageSource {
    fn load(&self, spec: &EditSpec) -> Result<Image>;
}

/// Renders entries on demand, quantized to 8 bits so they match PNGs on disk.
#[derive(Debug, Clone)]
pub struct RenderSource {
    catalog: AttributeCatalog,
    size: [usize; 2],
}

impl RenderSource {
    pub fn new(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self { catalog: manifest.catalog()?, size: manifest.render_size })
    }
}

impl ImageSource for RenderSource {
    fn load(&self, spec: &EditSpec) -> Result<Image> {
        Ok(render_edit(&self.catalog, spec, self.size[0], self.size[1])?.pixels.quantized())
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRecord {
    pub epoch: u32,
    pub step: u64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
    pub s_range: f64,
    pub lr: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

/// Settings shared by training and validation steps.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig<'a> {
    pub temperature: f64,
    pub objective: Objective,
    pub policy: &'a AugmentPolicy,
}

impl<'a> StepConfig<'a> {
    pub fn from_pretrain(config: &'a PretrainConfig) -> Self {
        Self { temperature: config.temperature, objective: config.objective, policy: &config.policy }
    }
}

/// Disjoint train/validation identities; the training share is `round(fraction * n)`
/// clamped so both sides are non-empty.
pub fn split_identities(identities: &[u64], fraction: f64, seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    if identities.len() < 2 {
        return Err(config_err!("need at least two identities to split, got {}", identities.len()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(config_err!("split fraction must lie in (0, 1), got {fraction}"));
    }
    let mut ids = identities.to_vec();
    ids.shuffle(&mut rng::derived_stream(seed, "identity-split", &[]));
    let n_train = (libm::round(fraction * ids.len() as f64) as usize).clamp(1, ids.len() - 1);
    let val = ids.split_off(n_train);
    Ok((ids, val))
}

fn describe(batch: &[FacePair]) -> String {
    let items: Vec<String> = batch
        .iter()
        .map(|p| format!("({}, {}, {} -> {})", p.identity_seed, p.attribute, p.alpha_x, p.alpha_y))
        .collect();
    format!("[{}]", items.join(", "))
}

struct Forward<T> {
    n: usize,
    views: Tensor<T>,
}

/// Augmented views stacked as `[x~ (view 1); x~ (view 2); y~]`, omitting blocks
/// the objective does not use.
fn build_views<T: Real, S: ImageSource + ?Sized, R: Rng + ?Sized>(
    batch: &[FacePair],
    source: &S,
    cfg: &StepConfig,
    rng: &mut R,
) -> Result<Forward<T>> {
    let n = batch.len();
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for pair in batch {
        let img_x = source.load(&pair.spec_x())?;
        x1.push(augment(&img_x, cfg.policy, rng)?);
        if cfg.objective.inter {
            x2.push(augment(&img_x, cfg.policy, rng)?);
        }
        if cfg.objective.intra {
            let img_y = source.load(&pair.spec_y())?;
            y.push(augment(&img_y, cfg.policy, rng)?);
        }
    }
    let all: Vec<&Image> = x1.iter().chain(&x2).chain(&y).collect();
    Ok(Forward { n, views: Tensor::from_images(&all) })
}

fn intra_targets<T: Real>(batch: &[FacePair], target: IntraTarget) -> Vec<T> {
    batch
        .iter()
        .map(|p| {
            let d = p.signed_delta();
            T::of(match target {
                IntraTarget::Absolute => d.abs(),
                IntraTarget::Signed => d,
            })
        })
        .collect()
}

/// Loss and (when `backprop`) accumulated gradients for one batch.
fn loss_and_grad<T: Real, S: ImageSource + ?Sized, R: Rng + ?Sized>(
    model: &mut ComFaceModel<T>,
    batch: &[FacePair],
    source: &S,
    cfg: &StepConfig,
    rng: &mut R,
    backprop: bool,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(contract_err!("empty batch"));
    }
    if !cfg.objective.inter && !cfg.objective.intra {
        return Err(config_err!("objective must enable at least one loss term"));
    }
    let fwd: Forward<T> = build_views(batch, source, cfg, rng)?;
    let n = fwd.n;
    let trace = model.backbone.forward_trace(fwd.views);
    let h = trace.embeddings();
    let e = h.dim(1);
    let mut grad_h = Tensor::<T>::zeros(h.shape());
    let mut stats = StepStats::default();

    if cfg.objective.inter {
        let hx = h.slice_items(0, 2 * n);
        let pt = model.projection.forward_trace(&hx);
        let (l, gz) = info_nce_with_grad(&pt.z, cfg.temperature)?;
        stats.l_inter = l.as_f64();
        if backprop {
            let gh = model.projection.backward(&pt, &gz);
            grad_h.data_mut()[..2 * n * e].copy_from_slice(gh.data());
        }
    }
    if cfg.objective.intra {
        let y_start = if cfg.objective.inter { 2 * n } else { n };
        let hx = h.slice_items(0, n);
        let hy = h.slice_items(y_start, y_start + n);
        let d = model.change.forward(&hx, &hy);
        let target = intra_targets::<T>(batch, cfg.objective.intra_target);
        let (l, gd) = match cfg.objective.intra_target {
            IntraTarget::Absolute => intra_mse_with_grad(&d, &target)?,
            IntraTarget::Signed => task_mse_with_grad(&d, &target)?,
        };
        stats.l_intra = l.as_f64();
        if backprop {
            let (gx, gy) = model.change.backward(&hx, &hy, &gd);
            let data = grad_h.data_mut();
            for (dst, src) in data[..n * e].iter_mut().zip(gx.data()) {
                *dst += *src;
            }
            for (dst, src) in data[y_start * e..(y_start + n) * e].iter_mut().zip(gy.data()) {
                *dst += *src;
            }
        }
    }
    stats.l_total = combined_loss(stats.l_inter, stats.l_intra);
    if !stats.l_total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {:?} on batch {}",
            stats,
            describe(batch)
        )));
    }
    if backprop {
        model.backbone.backward(&trace, &grad_h);
    }
    Ok(stats)
}

/// Zeroes gradients, then accumulates `dL/dθ` for `batch` into every parameter.
pub fn batch_gradients<T: Real, S: ImageSource + ?Sized, R: Rng + ?Sized>(
    model: &mut ComFaceModel<T>,
    batch: &[FacePair],
    source: &S,
    cfg: &StepConfig,
    rng: &mut R,
) -> Result<StepStats> {
    model.zero_grad();
    loss_and_grad(model, batch, source, cfg, rng, true)
}

/// One Adam step on `batch`. `x~` view 1 and `y~` feed the change head; both
/// `x~` views feed the contrastive term.
pub fn train_step<T: Real, S: ImageSource + ?Sized, R: Rng + ?Sized>(
    model: &mut ComFaceModel<T>,
    adam: &mut Adam<T>,
    batch: &[FacePair],
    source: &S,
    cfg: &StepConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let stats = batch_gradients(model, batch, source, cfg, rng)?;
    let mut finite = true;
    model.visit("", &mut |_, p| finite &= p.grad.iter().all(|g| g.is_finite()));
    if !finite {
        return Err(Error::NonFinite(format!("gradient on batch {}", describe(batch))));
    }
    adam.step(model, lr, &optim::all);
    Ok(stats)
}

/// Loss on `batch` without touching parameters.
pub fn evaluate_batch<T: Real, S: ImageSource + ?Sized, R: Rng + ?Sized>(
    model: &ComFaceModel<T>,
    batch: &[FacePair],
    source: &S,
    cfg: &StepConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let mut scratch = model.clone();
    loss_and_grad(&mut scratch, batch, source, cfg, rng, false)
}

/// Everything needed to continue a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainState<T> {
    pub model: ComFaceModel<T>,
    pub adam: Adam<T>,
    /// Last completed epoch (0 before training).
    pub epoch: u32,
    pub global_step: u64,
    pub best_val: Option<f64>,
}

impl<T: Real> PretrainState<T> {
    pub fn new(config: &PretrainConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model: ComFaceModel::new(&config.model, rng::derive(seed, "model", &[]))?,
            adam: Adam::new(),
            epoch: 0,
            global_step: 0,
            best_val: None,
        })
    }
}

/// Steps in one epoch over `train_identities` identities.
pub fn steps_per_epoch(config: &PretrainConfig, train_identities: usize) -> usize {
    (train_identities * config.pairs_per_identity).div_ceil(config.batch_size).max(1)
}

/// Runs epoch `state.epoch + 1`. Each step's batch and augmentations come from a
/// stream derived from `(seed, epoch, step)`, so a resumed run replays exactly.
pub fn run_epoch<T: Real, S: ImageSource + ?Sized>(
    state: &mut PretrainState<T>,
    config: &PretrainConfig,
    train: &DatasetManifest,
    source: &S,
    seed: u64,
    clock: &dyn Fn() -> f64,
    on_step: &mut dyn FnMut(&TrainingLogRecord) -> Result<()>,
) -> Result<Vec<TrainingLogRecord>> {
    let epoch = state.epoch + 1;
    if epoch > config.epochs {
        return Err(config_err!("run already finished {} epochs", config.epochs));
    }
    let range = current_range(&config.schedule, epoch)?;
    let lr = config.learning_rate_at(epoch);
    let sampler = PairSampler::new(&train.alpha_grid, config.sampling)?;
    let cfg = StepConfig::from_pretrain(config);
    let steps = steps_per_epoch(config, train.identities.len());
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut r = rng::derived_stream(seed, "pretrain-step", &[epoch as u64, step as u64]);
        let batch = build_batch_at(train, range, config.batch_size, &sampler, &mut r)?;
        let stats = train_step(&mut state.model, &mut state.adam, &batch, source, &cfg, lr, &mut r)?;
        state.global_step += 1;
        let record = TrainingLogRecord {
            epoch,
            step: state.global_step,
            l_inter: stats.l_inter,
            l_intra: stats.l_intra,
            l_total: stats.l_total,
            s_range: range,
            lr,
            wall_time: clock(),
        };
        on_step(&record)?;
        records.push(record);
    }
    state.epoch = epoch;
    Ok(records)
}

/// Fixed held-out pairs at the hardest curriculum range.
pub fn validation_pairs(config: &PretrainConfig, val: &DatasetManifest, seed: u64) -> Result<Vec<FacePair>> {
    let range = config.schedule.s_max / config.schedule.stage_count() as f64;
    let sampler = PairSampler::new(&val.alpha_grid, config.sampling)?;
    let mut r = rng::derived_stream(seed, "validation-pairs", &[]);
    let mut pairs = Vec::with_capacity(config.validation_pairs);
    while pairs.len() < config.validation_pairs {
        let n = config.batch_size.min(config.validation_pairs - pairs.len());
        pairs.extend(build_batch_at(val, range, n, &sampler, &mut r)?);
    }
    Ok(pairs)
}

/// Pair-weighted mean loss over `pairs` in batches, with fixed augmentation streams.
pub fn validate<T: Real, S: ImageSource + ?Sized>(
    model: &ComFaceModel<T>,
    config: &PretrainConfig,
    pairs: &[FacePair],
    source: &S,
    seed: u64,
) -> Result<StepStats> {
    let cfg = StepConfig::from_pretrain(config);
    let mut total = StepStats::default();
    for (i, chunk) in pairs.chunks(config.batch_size).enumerate() {
        let mut r = rng::derived_stream(seed, "validation-augment", &[i as u64]);
        let s = evaluate_batch(model, chunk, source, &cfg, &mut r)?;
        let w = chunk.len() as f64 / pairs.len() as f64;
        total.l_inter += s.l_inter * w;
        total.l_intra += s.l_intra * w;
    }
    total.l_total = combined_loss(total.l_inter, total.l_intra);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GenerationConfig;
    use crate::model::ModelConfig;
    use crate::nn::BackboneConfig;
    use alloc::string::ToString;
    use alloc::vec;

    fn tiny_manifest(ids: usize) -> DatasetManifest {
        let cfg = GenerationConfig {
            identities: ids,
            attributes: vec!["smile".to_string()],
            grid_step: 0.5,
            size: 16,
            materialize: false,
            task: None,
        };
        DatasetManifest::from_config(&cfg, 1).unwrap()
    }

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            batch_size: 4,
            epochs: 2,
            pairs_per_identity: 2,
            validation_pairs: 4,
            policy: AugmentPolicy { output_size: [16, 16], ..Default::default() },
            model: ModelConfig {
                input_size: [16, 16],
                backbone: BackboneConfig::plain(&[4, 8]),
                projection_hidden: 8,
                projection_dim: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let ids: Vec<u64> = (0..100).collect();
        let (a, b) = split_identities(&ids, 0.9, 3).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert!(a.iter().all(|i| !b.contains(i)));
        let mut all: Vec<u64> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(split_identities(&ids, 0.9, 3).unwrap(), (a, b));
        assert!(split_identities(&[1], 0.9, 0).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_updates() {
        let m = tiny_manifest(6);
        let src = RenderSource::new(&m).unwrap();
        let cfg = tiny_config();
        let run = || {
            let mut st = PretrainState::<f32>::new(&cfg, 2).unwrap();
            let recs = run_epoch(&mut st, &cfg, &m, &src, 2, &|| 0.0, &mut |_| Ok(())).unwrap();
            (st.model, recs)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        for r in &r1 {
            assert_eq!(r.l_total, r.l_inter + r.l_intra);
        }
    }

    #[test]
    fn change_head_gets_no_gradient_without_intra_term() {
        let m = tiny_manifest(4);
        let src = RenderSource::new(&m).unwrap();
        let mut cfg = tiny_config();
        cfg.objective.intra = false;
        let mut model = ComFaceModel::<f64>::new(&cfg.model, 0).unwrap();
        let sampler = PairSampler::new(&m.alpha_grid, cfg.sampling).unwrap();
        let mut r = rng::stream(0);
        let batch = build_batch_at(&m, 10.0, 4, &sampler, &mut r).unwrap();
        model.zero_grad();
        loss_and_grad(&mut model, &batch, &src, &StepConfig::from_pretrain(&cfg), &mut r, true).unwrap();
        assert!(model.change.linear.weight.grad.iter().all(|g| *g == 0.0));
        assert!(model.change.linear.bias.grad.iter().all(|g| *g == 0.0));
        assert!(model.projection.output.weight.grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn validation_is_repeatable() {
        let m = tiny_manifest(5);
        let src = RenderSource::new(&m).unwrap();
        let cfg = tiny_config();
        let model = ComFaceModel::<f32>::new(&cfg.model, 1).unwrap();
        let pairs = validation_pairs(&cfg, &m, 4).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            assert!(p.signed_delta().abs() <= 2.5);
        }
        let a = validate(&model, &cfg, &pairs, &src, 4).unwrap();
        let b = validate(&model, &cfg, &pairs, &src, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_length_follows_pairs_per_identity() {
        let cfg = PretrainConfig::default();
        assert_eq!(steps_per_epoch(&cfg, 450), 29);
    }
}

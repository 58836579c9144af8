//! Downstream change estimation: subject-disjoint folds, within-subject pairs,
//! linear evaluation and fine-tuning of the change head, and metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TransferConfig;
use crate::error::{config_err, contract_err, Error, Result};
use crate::image::Image;
use crate::losses::task_mse_with_grad;
use crate::model::{ChangeHead, ComFaceModel};
use crate::nn::Module;
use crate::optim::Adam;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub subject_id: String,
    pub image_ref: String,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

/// Two samples of one subject, by index into the task's sample list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub subject_id: String,
    pub a: usize,
    pub b: usize,
    /// `label[b] - label[a]`
    pub gt_change: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

impl FoldSplit {
    /// Errors if any subject sits in two partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in self.train_subjects.iter().chain(&self.val_subjects).chain(&self.test_subjects) {
            if !seen.insert(s) {
                return Err(contract_err!("subject {s} appears in two partitions of fold {}", self.fold_index));
            }
        }
        Ok(())
    }
}

/// `k` subject-level folds. Test sets partition the subjects (sizes differ by at
/// most one); validation takes `round(val_fraction * |train|)` subjects, at least
/// one, from each fold's training subjects.
pub fn make_folds<S: AsRef<str>>(subjects: &[S], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    let unique: BTreeSet<&str> = subjects.iter().map(AsRef::as_ref).collect();
    if unique.len() != subjects.len() {
        return Err(config_err!("subject list contains duplicates"));
    }
    if k < 2 || k > unique.len() {
        return Err(config_err!("cannot make {k} folds from {} subjects", unique.len()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(config_err!("val_fraction must lie in [0, 1)"));
    }
    let mut order: Vec<String> = unique.into_iter().map(String::from).collect();
    order.shuffle(&mut rng::derived_stream(seed, "folds", &[]));
    let n = order.len();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = n / k + usize::from(fold < n % k);
        let test: Vec<String> = order[start..start + size].to_vec();
        let mut rest: Vec<String> = order[..start].iter().chain(&order[start + size..]).cloned().collect();
        rest.shuffle(&mut rng::derived_stream(seed, "fold-val", &[fold as u64]));
        let n_val = if val_fraction > 0.0 {
            (libm::round(val_fraction * rest.len() as f64) as usize).clamp(1, rest.len() - 1)
        } else {
            0
        };
        let val = rest.split_off(rest.len() - n_val);
        let sorted = |mut v: Vec<String>| {
            v.sort();
            v
        };
        let split = FoldSplit {
            fold_index: fold,
            train_subjects: sorted(rest),
            val_subjects: sorted(val),
            test_subjects: sorted(test),
        };
        split.check_disjoint()?;
        folds.push(split);
        start += size;
    }
    Ok(folds)
}

/// Sample indices grouped by subject, in first-seen order within each subject.
pub fn group_by_subject(samples: &[TaskSample]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        map.entry(s.subject_id.clone()).or_default().push(i);
    }
    map
}

/// `count` pairs of two distinct samples of one subject with random orientation.
/// A subject with fewer than two samples yields no pairs.
pub fn sample_task_pairs<R: Rng + ?Sized>(
    samples: &[TaskSample],
    indices: &[usize],
    count: usize,
    rng: &mut R,
) -> Vec<TaskPair> {
    if indices.len() < 2 {
        log::warn!("subject with {} sample(s) contributes no pairs", indices.len());
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let mut two = rand::seq::index::sample(rng, indices.len(), 2).into_vec();
            if rng.gen_bool(0.5) {
                two.swap(0, 1);
            }
            make_pair(samples, indices[two[0]], indices[two[1]])
        })
        .collect()
}

/// Every ordered pair of distinct samples, shuffled, truncated to `cap`.
pub fn all_ordered_pairs<R: Rng + ?Sized>(samples: &[TaskSample], indices: &[usize], cap: usize, rng: &mut R) -> Vec<TaskPair> {
    if indices.len() < 2 {
        log::warn!("subject with {} sample(s) contributes no pairs", indices.len());
        return Vec::new();
    }
    let mut pairs = Vec::new();
    for &a in indices {
        for &b in indices {
            if a != b {
                pairs.push(make_pair(samples, a, b));
            }
        }
    }
    pairs.shuffle(rng);
    pairs.truncate(cap);
    pairs
}

fn make_pair(samples: &[TaskSample], a: usize, b: usize) -> TaskPair {
    TaskPair { subject_id: samples[a].subject_id.clone(), a, b, gt_change: samples[b].label - samples[a].label }
}

/// Train, validation and test pairs of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPairs {
    pub fold_index: usize,
    pub train: Vec<TaskPair>,
    pub val: Vec<TaskPair>,
    pub test: Vec<TaskPair>,
}

/// Pairs for every fold. They depend only on `(samples, folds, config, seed)`,
/// never on the model, so every method sees the same lists.
pub fn build_fold_pairs(
    samples: &[TaskSample],
    folds: &[FoldSplit],
    config: &TransferConfig,
    seed: u64,
) -> Result<Vec<FoldPairs>> {
    let groups = group_by_subject(samples);
    let pick = |subjects: &[String], tag: &str, fold: usize, test: bool| -> Result<Vec<TaskPair>> {
        let mut out = Vec::new();
        for (si, s) in subjects.iter().enumerate() {
            let idx = groups.get(s).ok_or_else(|| config_err!("fold references unknown subject {s}"))?;
            let mut r = rng::derived_stream(seed, tag, &[fold as u64, si as u64]);
            out.extend(if test {
                all_ordered_pairs(samples, idx, config.test_pairs_cap, &mut r)
            } else {
                sample_task_pairs(samples, idx, config.train_pairs_per_subject, &mut r)
            });
        }
        Ok(out)
    };
    folds
        .iter()
        .map(|f| {
            f.check_disjoint()?;
            let fp = FoldPairs {
                fold_index: f.fold_index,
                train: pick(&f.train_subjects, "pairs-train", f.fold_index, false)?,
                val: pick(&f.val_subjects, "pairs-val", f.fold_index, false)?,
                test: pick(&f.test_subjects, "pairs-test", f.fold_index, true)?,
            };
            if fp.train.is_empty() || fp.test.is_empty() {
                return Err(config_err!("fold {} has no training or no test pairs", f.fold_index));
            }
            Ok(fp)
        })
        .collect()
}

/// JSON has no NaN; undefined metrics round-trip through `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(with = "nan_as_null")]
    pub mae: f64,
    /// NaN when either input has zero variance; `null` in JSON.
    #[serde(with = "nan_as_null")]
    pub pearson: f64,
    /// NaN when every ground-truth change is zero; `null` in JSON.
    #[serde(with = "nan_as_null")]
    pub direction_accuracy: f64,
    pub count: usize,
    /// Pairs entering the direction accuracy (nonzero ground truth).
    pub directional_count: usize,
}

/// MAE, Pearson correlation and sign agreement over pairs with nonzero ground truth.
pub fn compute_metrics(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(contract_err!("metrics need equal nonempty inputs, got {} and {}", pred.len(), gt.len()));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sxy += (p - mp) * (g - mg);
        sxx += (p - mp) * (p - mp);
        syy += (g - mg) * (g - mg);
    }
    let pearson = if sxx > 0.0 && syy > 0.0 {
        (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0)
    } else {
        log::warn!("Pearson correlation undefined: zero variance in predictions or ground truth");
        f64::NAN
    };
    let mut hits = 0usize;
    let mut directional = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if *g != 0.0 {
            directional += 1;
            if (*p > 0.0 && *g > 0.0) || (*p < 0.0 && *g < 0.0) {
                hits += 1;
            }
        }
    }
    let direction_accuracy = if directional > 0 { hits as f64 / directional as f64 } else { f64::NAN };
    Ok(Metrics { mae, pearson, direction_accuracy, count: pred.len(), directional_count: directional })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Frozen backbone, change-head linear layer trained from scratch.
    Linear,
    /// Backbone and change head trained from the given weights.
    #[serde(rename = "finetune")]
    FineTune,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::Linear => "linear",
            TransferMode::FineTune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    #[serde(with = "nan_as_null")]
    pub best_val_mae: f64,
    pub predictions: Vec<f64>,
    pub gt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TransferMode,
    pub folds: Vec<FoldResult>,
    /// Metrics over the concatenated test pairs of all folds.
    pub pooled: Metrics,
    /// Digest of the serialized pair lists; equal across methods on one task.
    pub pair_digest: String,
}

/// `h` for every image, in chunks of `batch`.
pub fn embed_all<T: Real>(model: &ComFaceModel<T>, images: &[&Image], batch: usize) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        parts.push(model.embed(chunk)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_items(&refs))
}

fn gather<T: Real>(h: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Tensor<T> {
    let e = h.dim(1);
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(h.item(r));
        n += 1;
    }
    Tensor::from_vec(&[n, e], data)
}

/// Predicted change for each pair from precomputed embeddings of every sample.
fn predict_cached<T: Real>(head: &ChangeHead<T>, h: &Tensor<T>, pairs: &[TaskPair]) -> Vec<f64> {
    let hx = gather(h, pairs.iter().map(|p| p.a));
    let hy = gather(h, pairs.iter().map(|p| p.b));
    head.forward(&hx, &hy).into_iter().map(|v| v.as_f64()).collect()
}

/// Embeddings of only the samples `pairs` touch; other rows stay zero.
fn embed_used<T: Real>(model: &ComFaceModel<T>, images: &[Image], pairs: &[TaskPair]) -> Result<Tensor<T>> {
    let used: BTreeSet<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    let idx: Vec<usize> = used.into_iter().collect();
    let refs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
    let h = embed_all(model, &refs, 64)?;
    let mut full = Tensor::zeros(&[images.len(), model.embed_dim()]);
    for (row, &i) in idx.iter().enumerate() {
        full.item_mut(i).copy_from_slice(h.item(row));
    }
    Ok(full)
}

/// Predictions of `model` for `pairs`.
pub fn predict<T: Real>(model: &ComFaceModel<T>, images: &[Image], pairs: &[TaskPair]) -> Result<Vec<f64>> {
    let h = embed_used(model, images, pairs)?;
    Ok(predict_cached(&model.change, &h, pairs))
}

fn mae(pred: &[f64], pairs: &[TaskPair]) -> f64 {
    pred.iter().zip(pairs).map(|(p, t)| (p - t.gt_change).abs()).sum::<f64>() / pairs.len().max(1) as f64
}

fn targets<T: Real>(pairs: &[TaskPair]) -> Vec<T> {
    pairs.iter().map(|p| T::of(p.gt_change)).collect()
}

/// Trains one fold starting from `base` and scores its test pairs.
///
/// The change-head linear layer is reinitialized in both modes. Training stops
/// after `patience` epochs without a lower validation MAE; the best-validation
/// weights are evaluated. Without validation pairs the final weights are used.
pub fn train_fold<T: Real>(
    base: &ComFaceModel<T>,
    images: &[Image],
    pairs: &FoldPairs,
    mode: TransferMode,
    config: &TransferConfig,
    seed: u64,
) -> Result<(FoldResult, ComFaceModel<T>)> {
    config.validate()?;
    for p in pairs.train.iter().chain(&pairs.val).chain(&pairs.test) {
        if p.a >= images.len() || p.b >= images.len() {
            return Err(contract_err!("pair references sample {} beyond {} images", p.a.max(p.b), images.len()));
        }
    }
    let fold = pairs.fold_index as u64;
    let mut model = base.clone();
    model.change.reset(&mut rng::derived_stream(seed, "transfer-head", &[fold]));
    let mut adam = Adam::<T>::new();
    let trainable: &dyn Fn(&str) -> bool = match mode {
        TransferMode::Linear => &|n: &str| n.starts_with("change."),
        TransferMode::FineTune => &|n: &str| !n.starts_with("projection."),
    };
    let frozen = match mode {
        TransferMode::Linear => Some(embed_used(&model, images, &pairs.train.iter().chain(&pairs.val).chain(&pairs.test).cloned().collect::<Vec<_>>())?),
        TransferMode::FineTune => None,
    };

    let mut order: Vec<usize> = (0..pairs.train.len()).collect();
    let mut best: Option<(f64, usize, ChangeHead<T>, Option<ComFaceModel<T>>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng::derived_stream(seed, "transfer-order", &[fold, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TaskPair> = chunk.iter().map(|&i| pairs.train[i].clone()).collect();
            let gt = targets::<T>(&batch);
            model.zero_grad();
            match &frozen {
                Some(h) => {
                    let hx = gather(h, batch.iter().map(|p| p.a));
                    let hy = gather(h, batch.iter().map(|p| p.b));
                    let d = model.change.forward(&hx, &hy);
                    let (l, g) = task_mse_with_grad(&d, &gt)?;
                    check_finite(l, pairs.fold_index, epoch)?;
                    model.change.backward(&hx, &hy, &g);
                }
                None => {
                    let b = batch.len();
                    let imgs: Vec<&Image> =
                        batch.iter().map(|p| &images[p.a]).chain(batch.iter().map(|p| &images[p.b])).collect();
                    model.check_images(&imgs)?;
                    let trace = model.backbone.forward_trace(Tensor::from_images(&imgs));
                    let h = trace.embeddings();
                    let hx = h.slice_items(0, b);
                    let hy = h.slice_items(b, 2 * b);
                    let d = model.change.forward(&hx, &hy);
                    let (l, g) = task_mse_with_grad(&d, &gt)?;
                    check_finite(l, pairs.fold_index, epoch)?;
                    let (gx, gy) = model.change.backward(&hx, &hy, &g);
                    model.backbone.backward(&trace, &Tensor::concat_items(&[&gx, &gy]));
                }
            }
            adam.step(&mut model, config.learning_rate, trainable);
        }
        if pairs.val.is_empty() {
            continue;
        }
        let val_pred = match &frozen {
            Some(h) => predict_cached(&model.change, h, &pairs.val),
            None => predict(&model, images, &pairs.val)?,
        };
        let val_mae = mae(&val_pred, &pairs.val);
        if best.as_ref().map_or(true, |b| val_mae < b.0) {
            let snapshot = frozen.is_none().then(|| model.clone());
            best = Some((val_mae, epoch, model.change.clone(), snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_val_mae, best_epoch) = match best {
        Some((v, e, head, snapshot)) => {
            match snapshot {
                Some(m) => model = m,
                None => model.change = head,
            }
            (v, e)
        }
        None => (f64::NAN, epochs_run),
    };
    let predictions = match &frozen {
        Some(h) => predict_cached(&model.change, h, &pairs.test),
        None => predict(&model, images, &pairs.test)?,
    };
    let gt: Vec<f64> = pairs.test.iter().map(|p| p.gt_change).collect();
    let metrics = compute_metrics(&predictions, &gt)?;
    let result = FoldResult { fold_index: pairs.fold_index, metrics, best_epoch, epochs_run, best_val_mae, predictions, gt };
    Ok((result, model))
}

fn check_finite<T: Real>(loss: T, fold: usize, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(alloc::format!("downstream loss {loss} in fold {fold}, epoch {epoch}")))
    }
}

/// Runs every fold and pools the test predictions.
pub fn evaluate<T: Real>(
    base: &ComFaceModel<T>,
    images: &[Image],
    folds: &[FoldPairs],
    mode: TransferMode,
    config: &TransferConfig,
    seed: u64,
    pair_digest: String,
) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(folds.len());
    for f in folds {
        let (r, _) = train_fold(base, images, f, mode, config, seed)?;
        log::info!(
            "{} fold {}: corr {:.4} mae {:.4} (best epoch {} of {})",
            mode.as_str(),
            r.fold_index,
            r.metrics.pearson,
            r.metrics.mae,
            r.best_epoch,
            r.epochs_run
        );
        results.push(r);
    }
    let pred: Vec<f64> = results.iter().flat_map(|r| r.predictions.iter().copied()).collect();
    let gt: Vec<f64> = results.iter().flat_map(|r| r.gt.iter().copied()).collect();
    let pooled = compute_metrics(&pred, &gt)?;
    Ok(EvalReport { mode, folds: results, pooled, pair_digest })
}

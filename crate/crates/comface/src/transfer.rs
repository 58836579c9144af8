//! Downstream evaluation runs: folds and pairs for a task, a pretrained or
//! scratch model, and the report files.

use std::path::Path;

use comface_core::config::{ExperimentConfig, TransferConfig};
use comface_core::image::Image;
use comface_core::model::{ComFaceModel, ModelConfig};
use comface_core::rng;
use comface_core::transfer::{build_fold_pairs, evaluate, make_folds, EvalReport, FoldPairs, FoldSplit, TransferMode};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Task;
use crate::error::{Error, Result};
use crate::io;

pub const REPORT_FILE: &str = "report.json";
pub const PAIRS_FILE: &str = "pairs.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Folds and pair lists for one task, shared by every method evaluated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProtocol {
    pub folds: Vec<FoldSplit>,
    pub pairs: Vec<FoldPairs>,
    /// SHA-256 of the JSON encoding of `folds` and `pairs`.
    pub digest: String,
}

impl TaskProtocol {
    pub fn build(task: &Task, config: &TransferConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let folds = make_folds(&task.subjects(), config.folds, config.val_fraction, rng::derive(seed, "folds", &[]))?;
        let pairs = build_fold_pairs(&task.samples, &folds, config, rng::derive(seed, "task-pairs", &[]))?;
        let encoded = serde_json::to_vec(&(&folds, &pairs)).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Self { folds, pairs, digest: io::sha256_hex(&encoded) })
    }
}

/// Where the model under evaluation comes from.
#[derive(Debug, Clone, Copy)]
pub enum BaseModel<'a> {
    Checkpoint(&'a Path),
    /// Random initialization of the configured architecture.
    Scratch(&'a ModelConfig),
}

impl BaseModel<'_> {
    pub fn load(&self, seed: u64) -> Result<ComFaceModel<f32>> {
        match self {
            BaseModel::Checkpoint(p) => Ok(Checkpoint::load(p)?.model),
            BaseModel::Scratch(cfg) => Ok(ComFaceModel::new(cfg, rng::derive(seed, "scratch-model", &[]))?),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            BaseModel::Checkpoint(p) => p.display().to_string(),
            BaseModel::Scratch(_) => String::from("scratch"),
        }
    }
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mode: String,
    pub pearson: f64,
    pub mae: f64,
    pub direction_accuracy: f64,
    pub test_pairs: usize,
    pub pair_digest: String,
}

impl SummaryRow {
    pub fn new(method: &str, report: &EvalReport) -> Self {
        Self {
            method: method.to_string(),
            mode: report.mode.as_str().to_string(),
            pearson: report.pooled.pearson,
            mae: report.pooled.mae,
            direction_accuracy: report.pooled.direction_accuracy,
            test_pairs: report.pooled.count,
            pair_digest: report.pair_digest.clone(),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

/// Evaluates `model` on a prepared protocol with already-loaded images.
pub fn evaluate_model(
    model: &ComFaceModel<f32>,
    images: &[Image],
    protocol: &TaskProtocol,
    mode: TransferMode,
    config: &TransferConfig,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate(model, images, &protocol.pairs, mode, config, rng::derive(seed, "transfer", &[]), protocol.digest.clone())?)
}

/// Full transfer run: writes `pairs.json`, `report.json` and `summary.csv` into `out`.
pub fn run_transfer(
    config: &ExperimentConfig,
    base: BaseModel<'_>,
    task: &Task,
    mode: TransferMode,
    out: &Path,
) -> Result<EvalReport> {
    let model = base.load(config.seed)?;
    let images = task.load_images(model.config.input_size)?;
    let protocol = TaskProtocol::build(task, &config.transfer, config.seed)?;
    log::info!(
        "task {}: {} samples, {} subjects, {} folds, pair digest {}",
        task.path.display(),
        task.samples.len(),
        task.subjects().len(),
        protocol.folds.len(),
        &protocol.digest[..12]
    );
    io::create_dir(out)?;
    io::write_json(&out.join(PAIRS_FILE), &protocol)?;
    let report = evaluate_model(&model, &images, &protocol, mode, &config.transfer, config.seed)?;
    io::write_json(&out.join(REPORT_FILE), &report)?;
    io::write_bytes(&out.join(SUMMARY_FILE), &summary_csv(&[SummaryRow::new(&base.describe(), &report)])?)?;
    log::info!(
        "{}: pooled corr {:.4}, mae {:.4}, direction {:.3}",
        mode.as_str(),
        report.pooled.pearson,
        report.pooled.mae,
        report.pooled.direction_accuracy
    );
    Ok(report)
}

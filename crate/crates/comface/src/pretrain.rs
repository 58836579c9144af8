//! The pretraining run: identity split, epochs with curriculum-driven batches,
//! per-step CSV log, per-epoch validation and checkpoints.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use comface_core::config::ExperimentConfig;
use comface_core::rng;
use comface_core::synth::DatasetManifest;
use comface_core::train::{run_epoch, split_identities, validate, validation_pairs, ImageSource, PretrainState, TrainingLogRecord};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingInfo};
use crate::dataset::DiskSource;
use crate::error::{Error, Result};
use crate::io;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const BEST_CKPT: &str = "checkpoints/best.ckpt";
pub const LAST_CKPT: &str = "checkpoints/last.ckpt";
pub const FINAL_CKPT: &str = "checkpoints/final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: u32,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<TrainingLogRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Pretrains on the dataset in `data`.
pub fn pretrain(config: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let source = DiskSource::open(data)?;
    let manifest = source.manifest().clone();
    pretrain_with_source(config, &manifest, &source, out, resume)
}

fn csv_lines<T: Serialize>(rows: &[T], header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    use std::io::Write;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let bytes = csv_lines(rows, fresh)?;
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Keeps only rows with `epoch <= last_epoch` (drops a partially logged epoch).
fn truncate_log<T: Serialize + serde::de::DeserializeOwned>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let rows: Vec<T> = r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| Error::parse(path, e))?;
    let kept: Vec<T> = rows.into_iter().filter(|x| keep(x)).collect();
    io::write_bytes(path, &csv_lines(&kept, true)?)?;
    Ok(kept)
}

/// Pretrains on `manifest` with images from `source`. With `resume`, training
/// continues after the checkpoint's last completed epoch and replays the same
/// random draws an uninterrupted run would have made.
pub fn pretrain_with_source(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    source: &dyn ImageSource,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.pretrain.validate()?;
    manifest.validate()?;
    let pc = &config.pretrain;
    if manifest.render_size != pc.model.input_size {
        return Err(Error::Invalid(format!(
            "dataset images are {:?} but the model expects {:?}",
            manifest.render_size, pc.model.input_size
        )));
    }
    let seed = config.seed;
    let (train_ids, val_ids) = split_identities(&manifest.identities, pc.identity_split_fraction, rng::derive(seed, "split", &[]))?;
    let train = manifest.with_identities(train_ids);
    let val = manifest.with_identities(val_ids);
    let val_pairs = validation_pairs(pc, &val, seed)?;

    io::create_dir(&out.join("checkpoints"))?;
    let log = out.join(TRAIN_LOG);
    let val_log = out.join(VAL_LOG);
    let (mut state, mut records, mut validation) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.training.seed != seed || ck.model.config != pc.model {
                return Err(Error::checkpoint(path, "seed or model configuration differs from this run"));
            }
            let epoch = ck.training.epoch;
            let records = truncate_log::<TrainingLogRecord>(&log, |r| r.epoch <= epoch)?;
            let validation = truncate_log::<ValidationRecord>(&val_log, |r| r.epoch <= epoch)?;
            let state = PretrainState {
                model: ck.model,
                adam: ck.adam,
                epoch,
                global_step: ck.training.global_step,
                best_val: ck.training.best_val,
            };
            (state, records, validation)
        }
        None => {
            for p in [&log, &val_log] {
                if p.exists() {
                    std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            (PretrainState::<f32>::new(pc, seed)?, Vec::new(), Vec::new())
        }
    };

    let start = Instant::now();
    let clock = || start.elapsed().as_secs_f64();
    let save = |state: &PretrainState<f32>, path: &Path| {
        Checkpoint {
            model: state.model.clone(),
            adam: state.adam.clone(),
            training: TrainingInfo {
                epoch: state.epoch,
                global_step: state.global_step,
                seed,
                best_val: state.best_val,
                pretrain: Some(pc.clone()),
            },
        }
        .save(path)
    };
    while state.epoch < pc.epochs {
        let epoch_records = run_epoch(&mut state, pc, &train, source, seed, &clock, &mut |_| Ok(()))?;
        append_csv(&log, &epoch_records)?;
        let v = validate(&state.model, pc, &val_pairs, source, seed)?;
        let best = state.best_val.map_or(true, |b| v.l_total < b);
        if best {
            state.best_val = Some(v.l_total);
        }
        let last = epoch_records.last().expect("epoch has steps");
        log::info!(
            "epoch {}: train L {:.4} (inter {:.4}, intra {:.4}), val L {:.4}{}, S {:.3}, lr {:.1e}",
            state.epoch,
            last.l_total,
            last.l_inter,
            last.l_intra,
            v.l_total,
            if best { " *" } else { "" },
            last.s_range,
            last.lr
        );
        let rec = ValidationRecord { epoch: state.epoch, l_inter: v.l_inter, l_intra: v.l_intra, l_total: v.l_total, best };
        append_csv(&val_log, std::slice::from_ref(&rec))?;
        validation.push(rec);
        records.extend(epoch_records);
        if best {
            save(&state, &out.join(BEST_CKPT))?;
        }
        save(&state, &out.join(LAST_CKPT))?;
    }
    save(&state, &out.join(FINAL_CKPT))?;
    if !out.join(BEST_CKPT).exists() {
        save(&state, &out.join(BEST_CKPT))?;
    }
    Ok(PretrainOutcome {
        best: out.join(BEST_CKPT),
        last: out.join(LAST_CKPT),
        final_checkpoint: out.join(FINAL_CKPT),
        log,
        records,
        validation,
    })
}

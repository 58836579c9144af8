//! Synthetic dataset generation, on-disk image access and task manifests.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use comface_core::augment::augment;
use comface_core::config::{GenerationConfig, TaskGeneration};
use comface_core::image::Image;
use comface_core::rng;
use comface_core::synth::{alpha_grid, render_edit, AttributeCatalog, DatasetManifest, EditSpec};
use comface_core::train::{ImageSource, RenderSource};
use comface_core::transfer::TaskSample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TASK_DIR: &str = "task";
pub const TASK_FILE: &str = "task.csv";

/// Runs `work` over `items` on up to `jobs` threads, preserving no order.
pub fn parallel_for<T: Sync>(items: &[T], jobs: usize, work: &(dyn Fn(&T) -> Result<()> + Sync)) -> Result<()> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().try_for_each(work);
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().try_for_each(work))).collect();
        handles.into_iter().try_for_each(|h| h.join().expect("render worker panicked"))
    })
}

/// Writes `manifest.json`, the PNGs when `config.materialize` is set, and the
/// held-out task when configured. Output is a pure function of `(config, seed)`.
pub fn generate_dataset(config: &GenerationConfig, seed: u64, out: &Path, jobs: usize) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::from_config(config, seed)?;
    io::create_dir(out)?;
    if config.materialize {
        let catalog = manifest.catalog()?;
        let entries: Vec<EditSpec> = manifest.entries().collect();
        let size = config.size;
        parallel_for(&entries, jobs, &|spec: &EditSpec| {
            let face = render_edit(&catalog, spec, size, size)?;
            io::write_png(&out.join(manifest.relative_path(spec)), &face.pixels)
        })?;
    }
    if let Some(task) = &config.task {
        write_synthetic_task(task, &manifest, config.size, seed, &out.join(TASK_DIR), jobs)?;
    }
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    log::info!("wrote {} entries for {} identities to {}", manifest.entry_count(), manifest.identities.len(), out.display());
    Ok(manifest)
}

/// Seeds of the task's subjects; drawn from a stream separate from the
/// pretraining pool, and checked disjoint from it.
pub fn task_subject_seeds(task: &TaskGeneration, seed: u64, pool: &[u64]) -> Result<Vec<u64>> {
    let pool: HashSet<u64> = pool.iter().copied().collect();
    let seeds: Vec<u64> = (0..task.subjects as u64).map(|i| rng::derive(seed, "task-subjects", &[i])).collect();
    if seeds.iter().any(|s| pool.contains(s)) {
        return Err(Error::Invalid("task subject collides with a pretraining identity".into()));
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskRow {
    subject_id: String,
    image_path: String,
    label: f64,
    session: String,
}

/// Renders each task subject at every grid point along the held-out attribute
/// and writes `task.csv` with label = alpha. Each image gets its own session
/// variation when `task.session` is set.
pub fn write_synthetic_task(
    task: &TaskGeneration,
    manifest: &DatasetManifest,
    size: usize,
    seed: u64,
    dir: &Path,
    jobs: usize,
) -> Result<PathBuf> {
    task.validate()?;
    let catalog = AttributeCatalog::builtin_subset(&[&task.attribute])?;
    let grid = alpha_grid(task.grid_step)?;
    let mut rows = Vec::new();
    let mut work = Vec::new();
    for (si, s) in task_subject_seeds(task, seed, &manifest.identities)?.into_iter().enumerate() {
        for (k, &alpha) in grid.iter().enumerate() {
            let spec = EditSpec { identity_seed: s, attribute: task.attribute.clone(), alpha };
            let subject_id = format!("t{s}");
            let row = TaskRow {
                image_path: format!("images/{subject_id}/{}.png", spec.alpha_millis()),
                subject_id,
                label: alpha,
                session: format!("s{k}"),
            };
            work.push((spec, dir.join(&row.image_path), rng::derive(seed, "task-session", &[si as u64, k as u64])));
            rows.push(row);
        }
    }
    let policy = task.session.as_ref().map(|v| v.policy(size));
    parallel_for(&work, jobs, &|(spec, path, session_seed): &(EditSpec, PathBuf, u64)| {
        let mut img = render_edit(&catalog, spec, size, size)?.pixels;
        if let Some(p) = &policy {
            img = augment(&img, p, &mut rng::stream(*session_seed))?;
        }
        io::write_png(path, &img)
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::parse(dir, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(dir, e.to_string()))?;
    let path = dir.join(TASK_FILE);
    io::write_bytes(&path, &bytes)?;
    Ok(path)
}

/// Reads entries from disk when the dataset is materialized, otherwise renders them.
pub struct DiskSource {
    root: PathBuf,
    manifest: DatasetManifest,
    render: RenderSource,
}

impl DiskSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        manifest.validate()?;
        let render = RenderSource::new(&manifest)?;
        Ok(Self { root: dir.to_path_buf(), manifest, render })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl ImageSource for DiskSource {
    fn load(&self, spec: &EditSpec) -> comface_core::Result<Image> {
        if !self.manifest.contains(spec) {
            return Err(comface_core::Error::Config(format!("{spec:?} is not in the dataset manifest")));
        }
        if !self.manifest.file_layout.materialized {
            return self.render.load(spec);
        }
        let path = self.root.join(self.manifest.relative_path(spec));
        io::read_png(&path).map_err(|e| comface_core::Error::Config(e.to_string()))
    }
}

/// A downstream dataset: samples plus the directory image paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub path: PathBuf,
    pub root: PathBuf,
    pub samples: Vec<TaskSample>,
}

impl Task {
    pub fn subjects(&self) -> Vec<String> {
        comface_core::transfer::group_by_subject(&self.samples).into_keys().collect()
    }

    /// Decodes every sample, resizing to `size` (`[height, width]`) when needed.
    pub fn load_images(&self, size: [usize; 2]) -> Result<Vec<Image>> {
        self.samples
            .iter()
            .map(|s| {
                let img = io::read_png(&self.root.join(&s.image_ref))?;
                Ok(img.resized(size[0], size[1]))
            })
            .collect()
    }

    /// Number of samples per subject.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        comface_core::transfer::group_by_subject(&self.samples).into_iter().map(|(k, v)| (k, v.len())).collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonTask {
    List(Vec<JsonRow>),
    Wrapped { samples: Vec<JsonRow> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    subject_id: String,
    image_path: String,
    label: f64,
    #[serde(default)]
    session: Option<String>,
}

/// Reads a task manifest: CSV with header `subject_id,image_path,label[,session]`,
/// or a JSON list of objects with the same keys. Every bad row is reported.
pub fn load_task(path: &Path) -> Result<Task> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let raw: Vec<(usize, Result<JsonRow, String>)> = if path.extension().is_some_and(|e| e == "json") {
        let parsed: JsonTask = io::read_json(path)?;
        let rows = match parsed {
            JsonTask::List(r) | JsonTask::Wrapped { samples: r } => r,
        };
        rows.into_iter().enumerate().map(|(i, r)| (i + 1, Ok(r))).collect()
    } else {
        read_csv_rows(path)?
    };
    let mut errors = Vec::new();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in raw {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("row {line}: {e}"));
                continue;
            }
        };
        if row.subject_id.trim().is_empty() {
            errors.push(format!("row {line}: empty subject_id"));
            continue;
        }
        if !row.label.is_finite() {
            errors.push(format!("row {line}: label {} is not finite", row.label));
            continue;
        }
        if !seen.insert((row.subject_id.clone(), row.image_path.clone())) {
            errors.push(format!("row {line}: duplicate (subject_id, image_path) = ({}, {})", row.subject_id, row.image_path));
            continue;
        }
        if !root.join(&row.image_path).is_file() {
            errors.push(format!("row {line}: image {} not found", row.image_path));
            continue;
        }
        samples.push(TaskSample {
            subject_id: row.subject_id,
            image_ref: row.image_path,
            label: row.label,
            session: row.session.filter(|s| !s.is_empty()),
        });
    }
    if samples.is_empty() && errors.is_empty() {
        errors.push("no samples".into());
    }
    if !errors.is_empty() {
        return Err(Error::Task { path: path.to_path_buf(), rows: errors });
    }
    Ok(Task { path: path.to_path_buf(), root, samples })
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, Result<JsonRow, String>)>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(si), Some(pi), Some(li)) = (col("subject_id"), col("image_path"), col("label")) else {
        return Err(Error::Task {
            path: path.to_path_buf(),
            rows: vec![format!("header must contain subject_id,image_path,label; got {:?}", headers.iter().collect::<Vec<_>>())],
        });
    };
    let session = col("session");
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let parsed = rec.map_err(|e| e.to_string()).and_then(|r| {
            let field = |k: usize, name: &str| r.get(k).map(str::to_string).ok_or_else(|| format!("missing {name}"));
            let label_text = field(li, "label")?;
            let label = label_text.parse::<f64>().map_err(|_| format!("label {label_text:?} is not a number"))?;
            Ok(JsonRow {
                subject_id: field(si, "subject_id")?,
                image_path: field(pi, "image_path")?,
                label,
                session: session.and_then(|k| r.get(k)).map(str::to_string),
            })
        });
        rows.push((line, parsed));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use comface_core::config::SessionVariation;
    use std::fs;

    fn write_images(dir: &Path, names: &[&str]) {
        let img = Image::zeros(4, 4);
        for n in names {
            io::write_png(&dir.join(n), &img).unwrap();
        }
    }

    #[test]
    fn csv_with_three_subjects_by_four_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("subject_id,image_path,label,session\n");
        let mut names = Vec::new();
        for s in 0..3 {
            for i in 0..4 {
                let n = format!("img/{s}_{i}.png");
                text.push_str(&format!("p{s},{n},{},\n", i as f64 * 1.5));
                names.push(n);
            }
        }
        write_images(dir.path(), &names.iter().map(String::as_str).collect::<Vec<_>>());
        fs::write(dir.path().join("t.csv"), text).unwrap();
        let task = load_task(&dir.path().join("t.csv")).unwrap();
        assert_eq!(task.samples.len(), 12);
        assert_eq!(task.subjects().len(), 3);
        assert!(task.samples.iter().all(|s| s.session.is_none()));
    }

    #[test]
    fn bad_rows_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png"]);
        let text = "subject_id,image_path,label\np,a.png,1\np,a.png,2\np,b.png,x\nq,missing.png,1\n";
        fs::write(dir.path().join("t.csv"), text).unwrap();
        match load_task(&dir.path().join("t.csv")) {
            Err(Error::Task { rows, .. }) => {
                assert_eq!(rows.len(), 3, "{rows:?}");
                assert!(rows[0].contains("duplicate"));
                assert!(rows[1].contains("not a number"));
                assert!(rows[2].contains("not found"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_manifest_matches_csv() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png"]);
        let json = r#"[{"subject_id":"p","image_path":"a.png","label":1.0},{"subject_id":"p","image_path":"b.png","label":2.5,"session":"s1"}]"#;
        fs::write(dir.path().join("t.json"), json).unwrap();
        let task = load_task(&dir.path().join("t.json")).unwrap();
        assert_eq!(task.samples.len(), 2);
        assert_eq!(task.samples[1].session.as_deref(), Some("s1"));
        let wrapped = format!(r#"{{"samples":{json}}}"#);
        fs::write(dir.path().join("w.json"), wrapped).unwrap();
        assert_eq!(load_task(&dir.path().join("w.json")).unwrap().samples, task.samples);
    }

    #[test]
    fn missing_header_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.csv"), "subject,image_path,label\n").unwrap();
        assert!(matches!(load_task(&dir.path().join("t.csv")), Err(Error::Task { .. })));
    }

    #[test]
    fn session_variation_is_per_image_and_optional() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GenerationConfig { identities: 4, size: 16, materialize: false, ..GenerationConfig::default() };
        let manifest = DatasetManifest::from_config(&gen, 3).unwrap();
        let mut task = TaskGeneration { subjects: 2, grid_step: 5.0, ..TaskGeneration::default() };
        let read = |name: &str, task: &TaskGeneration| {
            let csv = write_synthetic_task(task, &manifest, 16, 3, &dir.path().join(name), 1).unwrap();
            let t = load_task(&csv).unwrap();
            assert!(t.samples.iter().all(|x| x.session.is_some()));
            t.load_images([16, 16]).unwrap()
        };
        let varied = read("varied", &task);
        task.session = Some(SessionVariation { crop_scale_range: (1.0, 1.0), jitter_strength: 0.0, flip_prob: 0.0 });
        let identity = read("identity", &task);
        task.session = None;
        let clean = read("clean", &task);
        assert_eq!(identity, clean);
        assert_eq!(varied.len(), clean.len());
        assert!(varied.iter().zip(&clean).all(|(a, b)| a != b));
        assert_eq!(varied, read("again", &TaskGeneration { subjects: 2, grid_step: 5.0, ..TaskGeneration::default() }));
    }
}

//! Ablation matrix and training-scale sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use comface_core::config::{ExperimentConfig, IntraTarget};
use comface_core::curriculum::CurriculumSchedule;
use comface_core::synth::DatasetManifest;
use comface_core::train::RenderSource;
use comface_core::transfer::{EvalReport, TransferMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{parallel_for, Task};
use crate::error::{Error, Result};
use crate::io;
use crate::pretrain::{pretrain_with_source, BEST_CKPT};
use crate::run::RunDir;
use crate::transfer::{evaluate_model, BaseModel, TaskProtocol, REPORT_FILE};

pub const FINETUNE_REPORT: &str = "finetune_report.json";
pub const LINEAR_REPORT: &str = "linear_report.json";

/// The five rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// (a) contrastive term only.
    InterOnly,
    /// (b) change regression only.
    IntraOnly,
    /// (c) the full objective.
    Both,
    /// (d) full objective with signed change targets.
    SignedGt,
    /// (e) full objective at the hardest range for every epoch.
    NoCurriculum,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::InterOnly,
        AblationVariant::IntraOnly,
        AblationVariant::Both,
        AblationVariant::SignedGt,
        AblationVariant::NoCurriculum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::InterOnly => "inter_only",
            AblationVariant::IntraOnly => "intra_only",
            AblationVariant::Both => "both",
            AblationVariant::SignedGt => "signed_gt",
            AblationVariant::NoCurriculum => "no_curriculum",
        }
    }

    pub fn row_label(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation variant {s:?}")))
    }

    /// The base config with this variant's factor changed.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let p = &mut c.pretrain;
        match self {
            AblationVariant::InterOnly => p.objective.intra = false,
            AblationVariant::IntraOnly => p.objective.inter = false,
            AblationVariant::Both => {}
            AblationVariant::SignedGt => p.objective.intra_target = IntraTarget::Signed,
            AblationVariant::NoCurriculum => p.schedule = CurriculumSchedule::constant(p.schedule.s_max, p.epochs),
        }
        c
    }

    /// Flattened config keys this variant may change.
    pub fn allowed_diff(self) -> &'static [&'static str] {
        match self {
            AblationVariant::InterOnly => &["pretrain.objective.intra"],
            AblationVariant::IntraOnly => &["pretrain.objective.inter"],
            AblationVariant::Both => &[],
            AblationVariant::SignedGt => &["pretrain.objective.intra_target"],
            AblationVariant::NoCurriculum => &["pretrain.schedule.boundaries"],
        }
    }

    fn columns(self, base: &ExperimentConfig) -> (&'static str, &'static str, bool) {
        let c = self.apply(base);
        let o = c.pretrain.objective;
        let learning = match (o.inter, o.intra) {
            (true, true) => "both",
            (true, false) => "inter",
            (false, true) => "intra",
            (false, false) => "none",
        };
        let gt = match o.intra_target {
            IntraTarget::Absolute => "absolute",
            IntraTarget::Signed => "signed",
        };
        (learning, gt, c.pretrain.schedule.stage_count() > 1)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, x, out);
            }
        }
        Value::Array(a) => {
            out.insert(format!("{prefix}.len"), Value::from(a.len()));
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Flattened keys whose values differ between two configs.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<Vec<String>> {
    let enc = |c: &ExperimentConfig| serde_json::to_value(c).map_err(|e| Error::Invalid(e.to_string()));
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &enc(a)?, &mut fa);
    flatten("", &enc(b)?, &mut fb);
    let mut keys: Vec<String> = fa.keys().chain(fb.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().filter(|k| fa.get(k) != fb.get(k)).collect())
}

/// Fails unless `variant` differs from `base` only in its ablated factor.
pub fn check_controlled(base: &ExperimentConfig, variant: AblationVariant) -> Result<ExperimentConfig> {
    let cfg = variant.apply(base);
    let allowed = variant.allowed_diff();
    let stray: Vec<String> = config_diff(base, &cfg)?
        .into_iter()
        .filter(|k| !allowed.iter().any(|a| k == a || k.starts_with(&format!("{a}."))))
        .collect();
    if !stray.is_empty() {
        return Err(Error::Invalid(format!("variant {} changes unrelated config keys: {}", variant.name(), stray.join(", "))));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy)]
pub struct AblationOptions {
    /// Also run linear evaluation of each checkpoint.
    pub linear: bool,
    /// Add a row for fine-tuning (and linear evaluation) from random init.
    pub scratch: bool,
    pub jobs: usize,
    /// Rerun variants whose directories are already complete.
    pub force: bool,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self { linear: false, scratch: true, jobs: 1, force: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// Variant name, or `scratch`.
    pub method: String,
    pub finetune: EvalReport,
    pub linear: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub method: String,
    pub learning: String,
    pub intra_gt: String,
    pub curriculum: bool,
    pub finetune_corr: f64,
    pub finetune_mae: f64,
    pub finetune_acc: f64,
    pub linear_corr: Option<f64>,
    pub linear_mae: Option<f64>,
    pub linear_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub results: Vec<MethodResult>,
    pub rows: Vec<AblationRow>,
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

impl AblationTable {
    pub fn result(&self, method: &str) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

fn row(method: &str, label: &str, cols: (&str, &str, bool), r: &MethodResult) -> AblationRow {
    let lin = r.linear.as_ref().map(|l| l.pooled);
    AblationRow {
        row: label.to_string(),
        method: method.to_string(),
        learning: cols.0.to_string(),
        intra_gt: cols.1.to_string(),
        curriculum: cols.2,
        finetune_corr: r.finetune.pooled.pearson,
        finetune_mae: r.finetune.pooled.mae,
        finetune_acc: r.finetune.pooled.direction_accuracy,
        linear_corr: lin.map(|m| m.pearson),
        linear_mae: lin.map(|m| m.mae),
        linear_acc: lin.map(|m| m.direction_accuracy),
    }
}

fn markdown(rows: &[AblationRow]) -> String {
    let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::from("n/a") };
    let o = |v: Option<f64>| v.map(f).unwrap_or_else(|| String::from("-"));
    let mut s = String::from(
        "| | method | learning | intra GT | curriculum | fine-tune Corr | fine-tune MAE | fine-tune Acc | linear Corr |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.row,
            r.method,
            r.learning,
            r.intra_gt,
            if r.curriculum { "yes" } else { "no" },
            f(r.finetune_corr),
            f(r.finetune_mae),
            f(r.finetune_acc),
            o(r.linear_corr)
        );
    }
    s
}

/// Evaluates one base model on the shared protocol, reusing a completed run in `dir`.
fn evaluate_method(
    method: &str,
    base: &ExperimentConfig,
    model_source: BaseModel<'_>,
    task: &Task,
    protocol: &TaskProtocol,
    dir: &RunDir,
    linear: bool,
) -> Result<MethodResult> {
    let model = model_source.load(base.seed)?;
    let images = task.load_images(model.config.input_size)?;
    let finetune = evaluate_model(&model, &images, protocol, TransferMode::FineTune, &base.transfer, base.seed)?;
    io::write_json(&dir.join(FINETUNE_REPORT), &finetune)?;
    let linear = if linear {
        let r = evaluate_model(&model, &images, protocol, TransferMode::Linear, &base.transfer, base.seed)?;
        io::write_json(&dir.join(LINEAR_REPORT), &r)?;
        Some(r)
    } else {
        None
    };
    log::info!(
        "{method}: fine-tune corr {:.4}{}",
        finetune.pooled.pearson,
        linear.as_ref().map(|l| format!(", linear corr {:.4}", l.pooled.pearson)).unwrap_or_default()
    );
    Ok(MethodResult { method: method.to_string(), finetune, linear })
}

fn load_completed(path: &Path, method: &str, linear: bool, digest: &str) -> Result<Option<MethodResult>> {
    if !RunDir::is_complete(path) || (linear && !path.join(LINEAR_REPORT).exists()) {
        return Ok(None);
    }
    let finetune: EvalReport = io::read_json(&path.join(FINETUNE_REPORT))?;
    if finetune.pair_digest != digest {
        return Ok(None);
    }
    let linear = if linear { Some(io::read_json(&path.join(LINEAR_REPORT))?) } else { None };
    log::info!("{method}: reusing completed run in {}", path.display());
    Ok(Some(MethodResult { method: method.to_string(), finetune, linear }))
}

/// One pretraining run plus fine-tuning per variant, all on the same seeds and
/// downstream pairs; writes `ablation.csv` and `ablation.md` into `out`.
pub fn run_ablation(
    base: &ExperimentConfig,
    variants: &[AblationVariant],
    task: &Task,
    out: &Path,
    options: AblationOptions,
) -> Result<AblationTable> {
    base.validate()?;
    if variants.is_empty() {
        return Err(Error::Invalid(String::from("no ablation variants selected")));
    }
    let configs: Vec<(AblationVariant, ExperimentConfig)> =
        variants.iter().map(|&v| Ok((v, check_controlled(base, v)?))).collect::<Result<_>>()?;
    io::create_dir(out)?;
    io::write_json(&out.join("base_config.json"), base)?;
    let protocol = TaskProtocol::build(task, &base.transfer, base.seed)?;
    io::write_json(&out.join("pairs.json"), &protocol)?;

    let results = Mutex::new(BTreeMap::new());
    let mut jobs: Vec<Option<&(AblationVariant, ExperimentConfig)>> = configs.iter().map(Some).collect();
    if options.scratch {
        jobs.push(None);
    }
    parallel_for(&jobs, options.jobs, &|job| {
        let (name, cfg) = match job {
            Some((v, c)) => (v.name(), c),
            None => ("scratch", base),
        };
        let path = out.join(name);
        if !options.force {
            if let Some(r) = load_completed(&path, name, options.linear, &protocol.digest)? {
                results.lock().expect("results lock").insert(name, r);
                return Ok(());
            }
        }
        let dir = RunDir::prepare(&path, true)?;
        dir.snapshot(cfg)?;
        let r = match job {
            Some(_) => {
                let manifest = DatasetManifest::from_config(&cfg.generation, cfg.seed)?;
                let source = RenderSource::new(&manifest)?;
                log::info!("{name}: pretraining on {} identities", manifest.identities.len());
                let pre = pretrain_with_source(cfg, &manifest, &source, dir.path(), None)?;
                evaluate_method(name, cfg, BaseModel::Checkpoint(&pre.best), task, &protocol, &dir, options.linear)?
            }
            None => evaluate_method(name, cfg, BaseModel::Scratch(&cfg.pretrain.model), task, &protocol, &dir, options.linear)?,
        };
        io::write_json(&dir.join(REPORT_FILE), &r)?;
        dir.complete()?;
        results.lock().expect("results lock").insert(name, r);
        Ok(())
    })?;
    let mut by_name = results.into_inner().expect("results lock");

    let mut out_results = Vec::new();
    let mut rows = Vec::new();
    for v in variants {
        let r = by_name.remove(v.name()).expect("every variant ran");
        rows.push(row(v.name(), &format!("({})", v.row_label()), v.columns(base), &r));
        out_results.push(r);
    }
    if let Some(r) = by_name.remove("scratch") {
        rows.push(row("scratch", "", ("none", "-", false), &r));
        out_results.push(r);
    }
    let corr = |m: &str| rows.iter().find(|r| r.method == m).map(|r| r.finetune_corr);
    if let (Some(both), Some(inter)) = (corr("both"), corr("inter_only")) {
        if !(both >= inter) {
            log::warn!("both variant fine-tune corr {both:.4} is below inter_only {inter:.4}");
        }
    }
    let csv_path = out.join("ablation.csv");
    let md_path = out.join("ablation.md");
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    io::write_bytes(&csv_path, &w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    io::write_bytes(&md_path, markdown(&rows).as_bytes())?;
    Ok(AblationTable { results: out_results, rows, csv: csv_path, markdown: md_path })
}

/// One training-scale point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub identity_count: usize,
    pub image_count: u64,
}

impl ScalePoint {
    pub fn new(identity_count: usize, base: &ExperimentConfig) -> Result<Self> {
        let mut g = base.generation.clone();
        g.identities = identity_count;
        let m = DatasetManifest::from_config(&g, base.seed)?;
        Ok(Self { identity_count, image_count: m.entry_count() })
    }
}

pub fn parse_points(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad scale point {p:?}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub identity_count: usize,
    pub image_count: u64,
    pub pearson: f64,
    pub mae: f64,
    pub direction_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleCurve {
    pub points: Vec<ScaleResult>,
    pub reports: Vec<EvalReport>,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

/// A line plot of fine-tune correlation against image count, log-scaled x axis.
pub fn svg_plot(points: &[ScaleResult]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = points.iter().map(|p| (p.image_count as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| if p.pearson.is_finite() { p.pearson } else { 0.0 }).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.iter().fold((0.0f64, 1.0f64), |(a, b), &y| (a.min(y), b.max(y)));
    let sx = |x: f64| if x1 > x0 { m + (x - x0) / (x1 - x0) * (w - 2.0 * m) } else { w / 2.0 };
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    for t in [y0, (y0 + y1) / 2.0, y1] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t:.2}</text>", m - 4.0, sy(t) + 4.0);
    }
    let path: Vec<String> = xs.iter().zip(&ys).map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>", path.join(" "));
    for (p, (&x, &y)) in points.iter().zip(xs.iter().zip(&ys)) {
        let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f77b4\"/>", sx(x), sy(y));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", sx(x), h - m + 16.0, p.image_count);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">training images (log scale)</text>", w / 2.0, h - 8.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">fine-tune Corr</text>", h / 2.0, h / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Pretraining plus fine-tuning at each identity count, every other setting
/// (seeds included) held fixed. Writes `scale_sweep.csv` and `scale_sweep.svg`.
pub fn run_scale_sweep(base: &ExperimentConfig, points: &[usize], task: &Task, out: &Path, jobs: usize) -> Result<ScaleCurve> {
    base.validate()?;
    if points.is_empty() || points.contains(&0) || points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!("scale points must be positive and increasing, got {points:?}")));
    }
    let scale: Vec<ScalePoint> = points.iter().map(|&n| ScalePoint::new(n, base)).collect::<Result<_>>()?;
    io::create_dir(out)?;
    let protocol = TaskProtocol::build(task, &base.transfer, base.seed)?;
    io::write_json(&out.join("pairs.json"), &protocol)?;
    let reports = Mutex::new(BTreeMap::new());
    parallel_for(&scale, jobs, &|p: &ScalePoint| {
        let mut cfg = base.clone();
        cfg.generation.identities = p.identity_count;
        cfg.validate()?;
        let dir = RunDir::prepare(&out.join(format!("identities_{}", p.identity_count)), true)?;
        dir.snapshot(&cfg)?;
        let manifest = DatasetManifest::from_config(&cfg.generation, cfg.seed)?;
        let source = RenderSource::new(&manifest)?;
        log::info!("scale {}: pretraining on {} images", p.identity_count, p.image_count);
        pretrain_with_source(&cfg, &manifest, &source, dir.path(), None)?;
        let r = evaluate_method(
            &format!("identities_{}", p.identity_count),
            &cfg,
            BaseModel::Checkpoint(&dir.join(BEST_CKPT)),
            task,
            &protocol,
            &dir,
            false,
        )?;
        dir.complete()?;
        reports.lock().expect("reports lock").insert(p.identity_count, r.finetune);
        Ok(())
    })?;
    let reports: Vec<EvalReport> = reports.into_inner().expect("reports lock").into_values().collect();
    let points: Vec<ScaleResult> = scale
        .iter()
        .zip(&reports)
        .map(|(p, r)| ScaleResult {
            identity_count: p.identity_count,
            image_count: p.image_count,
            pearson: r.pooled.pearson,
            mae: r.pooled.mae,
            direction_accuracy: r.pooled.direction_accuracy,
        })
        .collect();
    let csv_path = out.join("scale_sweep.csv");
    let plot = out.join("scale_sweep.svg");
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &points {
        w.serialize(p).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    io::write_bytes(&csv_path, &w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    io::write_bytes(&plot, svg_plot(&points).as_bytes())?;
    Ok(ScaleCurve { points, reports, csv: csv_path, plot })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_change_only_their_factor() {
        let base = ExperimentConfig::default();
        for v in AblationVariant::ALL {
            let cfg = check_controlled(&base, v).unwrap();
            let diff = config_diff(&base, &cfg).unwrap();
            assert_eq!(diff.is_empty(), v == AblationVariant::Both, "{v:?}: {diff:?}");
        }
        let inter = AblationVariant::InterOnly.apply(&base);
        assert!(inter.pretrain.objective.inter && !inter.pretrain.objective.intra);
        let signed = AblationVariant::SignedGt.apply(&base);
        assert_eq!(signed.pretrain.objective.intra_target, IntraTarget::Signed);
        let flat = AblationVariant::NoCurriculum.apply(&base);
        for e in 1..=flat.pretrain.epochs {
            assert_eq!(comface_core::curriculum::current_range(&flat.pretrain.schedule, e).unwrap(), 10.0);
        }
    }

    #[test]
    fn stray_differences_are_caught() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.pretrain.learning_rate = 1e-3;
        other.pretrain.objective.intra = false;
        let diff = config_diff(&base, &other).unwrap();
        assert_eq!(diff, vec!["pretrain.learning_rate".to_string(), "pretrain.objective.intra".to_string()]);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(AblationVariant::NoCurriculum.row_label(), 'e');
        assert!(AblationVariant::parse("both_plus").is_err());
    }

    #[test]
    fn scale_points_count_images() {
        let base = ExperimentConfig::default();
        let p = ScalePoint::new(50, &base).unwrap();
        assert_eq!(p.image_count, 50 * 7 * 101);
        assert_eq!(parse_points("50, 200,500").unwrap(), vec![50, 200, 500]);
        assert!(parse_points("50,x").is_err());
    }

    #[test]
    fn plot_has_one_marker_per_point() {
        let pts: Vec<ScaleResult> = [(50, 0.2), (200, 0.1), (500, f64::NAN)]
            .iter()
            .map(|&(n, c)| ScaleResult { identity_count: n, image_count: n as u64 * 707, pearson: c, mae: 1.0, direction_accuracy: 0.5 })
            .collect();
        let svg = svg_plot(&pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}

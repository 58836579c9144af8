//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use comface_core::config::ExperimentConfig;
use comface_core::transfer::TransferMode;
use serde_json::json;

use crate::dataset::{generate_dataset, load_task};
use crate::error::{Error, Result};
use crate::experiments::{parse_points, run_ablation, run_scale_sweep, AblationOptions, AblationVariant};
use crate::io;
use crate::pretrain::pretrain;
use crate::run::RunDir;
use crate::saliency::{saliency_overlay, DEFAULT_ALPHA};
use crate::transfer::{run_transfer, BaseModel};

/// Environment variable naming the root directory for generated datasets.
pub const CACHE_ENV: &str = "COMFACE_CACHE";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "comface", version, about = "Facial representation learning for intra-personal change estimation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Root seed; overrides the config's `seed` and is recorded in the run snapshot.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for rendering and independent experiment jobs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overwrite an existing completed run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Linear,
    Finetune,
}

impl From<ModeArg> for TransferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Linear => TransferMode::Linear,
            ModeArg::Finetune => TransferMode::FineTune,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset (and held-out task) described by a config.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `$COMFACE_CACHE/dataset-<seed>-<config digest>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain an encoder on a generated dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run with the same seed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear evaluation or fine-tuning on a paired task with subject-wise folds.
    Transfer {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained checkpoint; omit with `--scratch` to start from random weights.
        #[arg(long, required_unless_present = "scratch", conflicts_with = "scratch")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        /// Task manifest (CSV or JSON).
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value = "finetune")]
        mode: ModeArg,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation variants and a scratch baseline on one task.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of inter_only,intra_only,both,signed_gt,no_curriculum.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Also report linear evaluation.
        #[arg(long)]
        linear: bool,
        /// Skip the scratch baseline.
        #[arg(long)]
        no_scratch: bool,
    },
    /// Pretrain and fine-tune at several identity counts.
    ScaleSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated identity counts.
        #[arg(long, default_value = "50,200,500")]
        points: String,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an Eigen-CAM overlay for one image.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Parse and validate a config file, printing the resolved config.
    ValidateConfig { config: PathBuf },
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => io::load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_dataset_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let root = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Invalid(format!("gen needs --out or ${CACHE_ENV}")))?;
    let encoded = serde_json::to_vec(&cfg.generation).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(root.join(format!("dataset-{}-{}", cfg.seed, &io::sha256_hex(&encoded)[..12])))
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = resolve_config(config.as_deref(), g.seed)?;
            let out = match out {
                Some(o) => o,
                None => default_dataset_dir(&cfg)?,
            };
            let dir = RunDir::prepare(&out, g.force)?;
            dir.snapshot(&cfg)?;
            let m = generate_dataset(&cfg.generation, cfg.seed, dir.path(), g.jobs)?;
            dir.complete()?;
            print(json!({"dataset": dir.path(), "entries": m.entry_count(), "identities": m.identities.len()}));
        }
        Command::Pretrain { config, data, out, resume } => {
            let cfg = resolve_config(config.as_deref(), g.seed)?;
            let dir = RunDir::prepare(&out, g.force)?;
            dir.snapshot(&cfg)?;
            let o = pretrain(&cfg, &data, dir.path(), resume.as_deref())?;
            dir.complete()?;
            print(json!({"best": o.best, "final": o.final_checkpoint, "log": o.log}));
        }
        Command::Transfer { config, ckpt, scratch: _, task, mode, folds, out } => {
            let mut cfg = resolve_config(config.as_deref(), g.seed)?;
            if let Some(k) = folds {
                cfg.transfer.folds = k;
                cfg.validate()?;
            }
            let task = load_task(&task)?;
            let dir = RunDir::prepare(&out, g.force)?;
            dir.snapshot(&cfg)?;
            let base = match &ckpt {
                Some(p) => BaseModel::Checkpoint(p),
                None => BaseModel::Scratch(&cfg.pretrain.model),
            };
            let r = run_transfer(&cfg, base, &task, mode.into(), dir.path())?;
            dir.complete()?;
            print(json!({
                "report": dir.join(crate::transfer::REPORT_FILE),
                "pearson": r.pooled.pearson,
                "mae": r.pooled.mae,
                "direction_accuracy": r.pooled.direction_accuracy,
            }));
        }
        Command::Ablate { config, task, out, variants, linear, no_scratch } => {
            let cfg = resolve_config(config.as_deref(), g.seed)?;
            let variants = match variants {
                Some(v) => v.iter().map(|s| AblationVariant::parse(s.trim())).collect::<Result<Vec<_>>>()?,
                None => AblationVariant::ALL.to_vec(),
            };
            let task = load_task(&task)?;
            let dir = RunDir::prepare(&out, g.force)?;
            dir.snapshot(&cfg)?;
            let opts = AblationOptions { linear, scratch: !no_scratch, jobs: g.jobs, force: g.force };
            let t = run_ablation(&cfg, &variants, &task, dir.path(), opts)?;
            dir.complete()?;
            print(json!({"table": t.markdown, "csv": t.csv}));
        }
        Command::ScaleSweep { config, points, task, out } => {
            let cfg = resolve_config(config.as_deref(), g.seed)?;
            let points = parse_points(&points)?;
            let task = load_task(&task)?;
            let dir = RunDir::prepare(&out, g.force)?;
            dir.snapshot(&cfg)?;
            let c = run_scale_sweep(&cfg, &points, &task, dir.path(), g.jobs)?;
            dir.complete()?;
            print(json!({"csv": c.csv, "plot": c.plot}));
        }
        Command::Saliency { ckpt, image, out, alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Invalid(format!("alpha must be in [0, 1], got {alpha}")));
            }
            let m = saliency_overlay(&ckpt, &image, &out, alpha)?;
            print(json!({"overlay": out, "map_height": m.height, "map_width": m.width}));
        }
        Command::ValidateConfig { config } => {
            let cfg = resolve_config(Some(&config), g.seed)?;
            print(json!({"valid": true, "config": cfg}));
        }
    }
    Ok(())
}

fn init_logging(g: &Global) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp_secs().try_init();
}

/// Runs a command and maps the outcome to a process exit code. Failures print a
/// JSON error object on stderr.
pub fn main_with(cli: Cli) -> i32 {
    init_logging(&cli.global);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_FAILURE
            }
        }
    }
}

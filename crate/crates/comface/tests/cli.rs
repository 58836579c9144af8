use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use comface::checkpoint::Checkpoint;
use comface::dataset::generate_dataset;
use comface::io;
use comface::pretrain::{pretrain, LAST_CKPT, TRAIN_LOG};
use comface_core::config::ExperimentConfig;
use comface_core::train::TrainingLogRecord;
use comface_core::transfer::EvalReport;
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn micro() -> String {
    root().join("configs/micro.toml").to_string_lossy().into_owned()
}

fn comface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comface")).arg("--quiet").args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn keys(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Value::Object(m) = v {
        for (k, x) in m {
            let path = format!("{prefix}/{k}");
            out.insert(path.clone());
            keys(x, &path, out);
        }
    }
}

fn schema_keys(schema: &Value, node: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Some(r) = node.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return schema_keys(schema, &schema["$defs"][name], prefix, out);
    }
    if let Some(Value::Object(props)) = node.get("properties") {
        for (k, x) in props {
            let path = format!("{prefix}/{k}");
            out.insert(path.clone());
            schema_keys(schema, x, &path, out);
        }
    }
}

#[test]
fn shipped_configs_validate() {
    for name in ["reference.toml", "micro.toml"] {
        let out = comface(&["validate-config", &s(&root().join("configs").join(name))]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["valid"], Value::Bool(true));
    }
}

#[test]
fn schema_describes_every_config_key() {
    let schema: Value = io::read_json(&root().join("configs/config.schema.json")).unwrap();
    let config = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let mut from_config = BTreeSet::new();
    keys(&config, "", &mut from_config);
    // Backbone blocks are a tagged list; compare down to the block list itself.
    from_config.retain(|k| !k.contains("/blocks/"));
    let mut from_schema = BTreeSet::new();
    schema_keys(&schema, &schema, "", &mut from_schema);
    assert_eq!(from_config, from_schema);

    let validator = jsonschema::validator_for(&schema).unwrap();
    for name in ["reference.toml", "micro.toml"] {
        let cfg = io::load_config(&root().join("configs").join(name)).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
    }
    let bad = serde_json::json!({"pretrain": {"temperature": -1.0}});
    assert!(!validator.is_valid(&bad));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = comface(&["pretrain", "--config", &micro(), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    assert_eq!(comface(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(comface(&["gen", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_three_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[pretrain]\ntemperature = 0.0\n").unwrap();
    let out = comface(&["validate-config", &s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    std::fs::write(&bad, "[pretrain]\nunknown_key = 1\n").unwrap();
    assert_eq!(comface(&["validate-config", &s(&bad)]).status.code(), Some(3));

    let task = tmp.path().join("task.csv");
    std::fs::write(&task, "subject_id,image_path,label\na,missing.png,1.0\n").unwrap();
    let out = comface(&["transfer", "--scratch", "--task", &s(&task), "--out", &s(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn completed_runs_are_protected() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = s(&tmp.path().join("data"));
    assert_eq!(comface(&["gen", "--config", &micro(), "--out", &out_dir]).status.code(), Some(0));
    let again = comface(&["gen", "--config", &micro(), "--out", &out_dir]);
    assert_eq!(again.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&again.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "run_exists");
    assert_eq!(comface(&["--force", "gen", "--config", &micro(), "--out", &out_dir]).status.code(), Some(0));
}

#[test]
fn seed_flag_is_recorded_and_cache_root_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_comface"))
        .args(["--quiet", "--seed", "17", "gen", "--config", &micro()])
        .env("COMFACE_CACHE", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let dir = PathBuf::from(v["dataset"].as_str().unwrap());
    assert!(dir.starts_with(tmp.path()));
    let snapshot: ExperimentConfig = io::read_json(&dir.join("config.json")).unwrap();
    assert_eq!(snapshot.seed, 17);
}

#[test]
fn pipeline_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    assert_eq!(comface(&["gen", "--config", &micro(), "--out", &s(&data)]).status.code(), Some(0));
    for run in ["a", "b"] {
        let out = comface(&["pretrain", "--config", &micro(), "--data", &s(&data), "--out", &s(&t.join(run))]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read_log = |run: &str| -> Vec<TrainingLogRecord> {
        let mut r = csv::Reader::from_path(t.join(run).join(TRAIN_LOG)).unwrap();
        r.deserialize().map(|x| x.unwrap()).collect()
    };
    let (la, lb) = (read_log("a"), read_log("b"));
    assert!(!la.is_empty());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.epoch, x.step, x.l_inter, x.l_intra, x.l_total, x.s_range, x.lr), (y.epoch, y.step, y.l_inter, y.l_intra, y.l_total, y.s_range, y.lr));
        assert_eq!(x.l_total, x.l_inter + x.l_intra);
    }
    let ck = |run: &str| std::fs::read(t.join(run).join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(ck("a"), ck("b"));

    let task = s(&data.join("task/task.csv"));
    let ckpt = s(&t.join("a/checkpoints/best.ckpt"));
    let m = micro();
    let mut digests = Vec::new();
    for (name, extra) in [("lin", vec!["--ckpt", ckpt.as_str(), "--mode", "linear"]), ("ft", vec!["--ckpt", ckpt.as_str()]), ("scratch", vec!["--scratch"])] {
        let out_dir = s(&t.join(name));
        let mut args = vec!["transfer", "--config", m.as_str(), "--task", task.as_str(), "--out", out_dir.as_str()];
        args.extend(extra);
        let out = comface(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let report: EvalReport = io::read_json(&t.join(name).join("report.json")).unwrap();
        digests.push(report.pair_digest);
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let full: ExperimentConfig = io::load_config(Path::new(&micro())).unwrap();
    generate_dataset(&full.generation, full.seed, &t.join("data"), 1).unwrap();
    let whole = pretrain(&full, &t.join("data"), &t.join("whole"), None).unwrap();

    let mut first = full.clone();
    first.pretrain.epochs = 1;
    pretrain(&first, &t.join("data"), &t.join("split"), None).unwrap();
    let resumed = pretrain(&full, &t.join("data"), &t.join("split"), Some(&t.join("split").join(LAST_CKPT))).unwrap();

    let a = Checkpoint::load(&whole.final_checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.final_checkpoint).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.training.global_step, b.training.global_step);
    let strip = |r: &[TrainingLogRecord]| r.iter().map(|x| (x.step, x.l_total)).collect::<Vec<_>>();
    assert_eq!(strip(&whole.records), strip(&resumed.records));
    assert_eq!(whole.validation, resumed.validation);
}

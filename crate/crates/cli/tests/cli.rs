use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TOY: &str = r#"{
  "dataset": {"kind": "synthetic", "classes": 4, "per_class": 40, "test_per_class": 10, "dim": 4, "noise": 0.3},
  "num_tasks": 2,
  "label_ratio": 0.25,
  "buffer_capacity": 8,
  "seeds": [0, 1],
  "train": {"epochs_per_task": 2}
}"#;

fn nncsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nncsl"))
        .args(args)
        .env_remove("NNCSL_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.json");
    fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs `args` and returns the run directory printed on success.
fn run_ok(args: &[&str]) -> PathBuf {
    let o = nncsl(args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find_map(|l| l.strip_prefix("outputs: ")).expect("outputs line");
    PathBuf::from(line)
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn toy_run_writes_per_seed_files_and_an_aggregate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("out");
    let dir = run_ok(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert!(dir.starts_with(&out));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    let hash = resolved["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(dir.ends_with(&hash[..16]));

    for seed in [0, 1] {
        let sd = dir.join("nncsl").join(format!("seed_{seed}"));
        for f in ["matrix.csv", "learning_curve.csv", "summary.json"] {
            assert!(sd.join(f).is_file(), "missing {f} for seed {seed}");
        }
        assert!(!sd.join("embeddings.csv").exists());
        let matrix = fs::read_to_string(sd.join("matrix.csv")).unwrap();
        assert_eq!(matrix.lines().count(), 1 + 4);
        assert!(matrix.lines().skip(1).all(|l| l.starts_with(&hash)));
        let curve = fs::read_to_string(sd.join("learning_curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + 2 * 2);
        assert!(curve.lines().skip(1).all(|l| l.starts_with(&hash)));
        let summary: Value = serde_json::from_str(&fs::read_to_string(sd.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["config_hash"], hash.as_str());
        assert_eq!(summary["seed"], seed);
    }
    let agg: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("nncsl").join("summary.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([0, 1]));
    assert!(agg["acc"]["mean"].as_f64().unwrap() >= 0.0);
    assert!(agg["acc"]["std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn method_flags_produce_one_summary_each() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("out");
    let dir = run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "csl",
        "--method",
        "nncsl",
        "--seed",
        "3",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    for m in ["csl", "nncsl"] {
        let s: Value = serde_json::from_str(&fs::read_to_string(dir.join(m).join("summary.json")).unwrap()).unwrap();
        assert_eq!(s["method"], m);
        assert_eq!(s["seeds"], serde_json::json!([3]));
        assert!(s["acc"]["mean"].is_number());
    }
    assert!(!dir.join("paws").exists());
}

#[test]
fn rerun_gives_byte_identical_csvs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let common = ["run", "--config", cfg.to_str().unwrap(), "--dump-embeddings", "--output-dir"];
    let da = run_ok(&[&common[..], &[a.to_str().unwrap()]].concat());
    let db = run_ok(&[&common[..], &[b.to_str().unwrap()]].concat());
    assert_eq!(da.file_name(), db.file_name());
    let (fa, fb) = (csv_files(&da), csv_files(&db));
    assert_eq!(fa.len(), 6);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&da).unwrap(), y.strip_prefix(&db).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn output_root_can_come_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let root = tmp.path().join("env_root");
    let o = Command::new(env!("CARGO_BIN_EXE_nncsl"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "0"])
        .env("NNCSL_OUTPUT_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&root).unwrap().count(), 1);
}

#[test]
fn validate_prints_ok_and_the_defaulted_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"num_tasks": 2}"#);
    let o = nncsl(&["validate", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let (first, rest) = out.split_once('\n').unwrap();
    assert_eq!(first, "OK");
    let v: Value = serde_json::from_str(rest).unwrap();
    assert_eq!(v["num_tasks"], 2);
    assert_eq!(v["train"]["lambda_nnd"], 0.2);
    assert_eq!(v["dataset"]["kind"], "synthetic");
    assert!(v["config_hash"].is_string());
}

#[test]
fn validate_lists_every_violation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"num_tasks": 3, "seeds": [], "train": {"tau": 0.05, "eps": 0.05}}"#,
    );
    let o = nncsl(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("train.tau"), "{err}");
    assert!(err.contains("seeds"), "{err}");
    assert!(err.contains("num_tasks"), "{err}");
}

#[test]
fn too_small_label_ratio_is_reported_before_training() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"dataset": {"kind": "synthetic", "per_class": 20, "test_per_class": 5}, "label_ratio": 0.01}"#,
    );
    let o = nncsl(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("label_ratio"), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let o = nncsl(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn config_errors_name_the_field_and_exit_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"lambda_nd": 0.2}}"#);
    let o = nncsl(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
    let o = nncsl(&["validate", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_2_with_task_and_step() {
    let tmp = TempDir::new().unwrap();
    let text = TOY.replace(
        r#""train": {"epochs_per_task": 2}"#,
        r#""train": {"epochs_per_task": 2, "base_lr": 1e200, "peak_lr": 1e200, "final_lr": 1e200}"#,
    );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = nncsl(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("task 1") && err.contains("step"), "{err}");
}

#[test]
fn report_reaggregates_an_existing_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let out = tmp.path().join("out");
    let dir = run_ok(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    let agg = dir.join("nncsl").join("summary.json");
    let before = fs::read(&agg).unwrap();
    fs::remove_file(&agg).unwrap();
    let o = nncsl(&["report", "--dir", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("nncsl"));
    assert_eq!(fs::read(&agg).unwrap(), before);

    let o = nncsl(&["report", "--dir", tmp.path().join("nothing").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

//! Experiment execution, per-seed output files and cross-seed aggregation.

use std::fs;
use std::path::{Path, PathBuf};

use nncsl_core::metrics::mean_std;
use nncsl_core::trainer::{run_stream_with, RunOptions, RunOutcome};
use nncsl_core::{Error, Method};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "NNCSL_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{method} seed {seed} diverged: {source}")]
    Divergence { method: Method, seed: u64, source: Error },
    #[error("{method} seed {seed}: {source}")]
    Training { method: Method, seed: u64, source: Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Divergence { .. } => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub acc: f64,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub bwt_excluding_first: Option<f64>,
    pub per_task_final: Vec<f64>,
    /// Linear-head accuracy on each task's labeled samples right after training it.
    pub labeled_train_accuracy: Vec<f64>,
    pub mean_labeled_train_accuracy: f64,
    pub matrix: Vec<Vec<Option<f64>>>,
    pub random_init: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }

    fn of_opt(values: &[Option<f64>]) -> Option<Self> {
        values.iter().copied().collect::<Option<Vec<f64>>>().map(|v| Self::of(&v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub config_hash: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub acc: Stat,
    pub fwt: Option<Stat>,
    pub bwt: Option<Stat>,
    pub bwt_excluding_first: Option<Stat>,
    pub per_task_final: Vec<Stat>,
    pub labeled_train_accuracy: Stat,
}

pub fn aggregate(runs: &[SeedSummary]) -> Option<MethodSummary> {
    let first = runs.first()?;
    let tasks = first.per_task_final.len();
    Some(MethodSummary {
        config_hash: first.config_hash.clone(),
        method: first.method,
        seeds: runs.iter().map(|r| r.seed).collect(),
        acc: Stat::of(&runs.iter().map(|r| r.acc).collect::<Vec<_>>()),
        fwt: Stat::of_opt(&runs.iter().map(|r| r.fwt).collect::<Vec<_>>()),
        bwt: Stat::of_opt(&runs.iter().map(|r| r.bwt).collect::<Vec<_>>()),
        bwt_excluding_first: Stat::of_opt(&runs.iter().map(|r| r.bwt_excluding_first).collect::<Vec<_>>()),
        per_task_final: (0..tasks)
            .map(|j| Stat::of(&runs.iter().map(|r| r.per_task_final[j]).collect::<Vec<_>>()))
            .collect(),
        labeled_train_accuracy: Stat::of(&runs.iter().map(|r| r.mean_labeled_train_accuracy).collect::<Vec<_>>()),
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    pub methods: Vec<MethodSummary>,
}

/// Output root: the environment override if set, else the configured one
/// (relative paths are taken from the working directory).
pub fn output_root(resolved: &Resolved) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| resolved.config.output_dir.clone())
}

/// `<root>/<first 16 hex digits of the config hash>`.
pub fn run_dir(root: &Path, hash: &str) -> PathBuf {
    root.join(&hash[..16])
}

pub fn seed_dir(run_dir: &Path, method: Method, seed: u64) -> PathBuf {
    run_dir.join(method.name()).join(format!("seed_{seed}"))
}

/// Runs every (method, seed) pair, writing outputs under `root`.
pub fn run_experiment(resolved: &Resolved, root: &Path) -> Result<ExperimentOutcome, RunError> {
    let cfg = &resolved.config;
    let dir = run_dir(root, &resolved.hash);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut resolved_json = serde_json::to_value(cfg).expect("config serializes");
    resolved_json["config_hash"] = resolved.hash.clone().into();
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&resolved_json).expect("json") + "\n")
        .map_err(io_err(&cfg_path))?;

    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<Result<SeedSummary, RunError>> =
        jobs.par_iter().map(|&(m, s)| run_one(resolved, &dir, m, s)).collect();
    let mut seeds = Vec::with_capacity(results.len());
    for r in results {
        seeds.push(r?);
    }

    let mut methods = Vec::new();
    for &m in &cfg.methods {
        let runs: Vec<SeedSummary> = seeds.iter().filter(|s| s.method == m).cloned().collect();
        if let Some(summary) = aggregate(&runs) {
            write_json(&dir.join(m.name()).join("summary.json"), &summary)?;
            methods.push(summary);
        }
    }
    Ok(ExperimentOutcome {
        run_dir: dir,
        seeds,
        methods,
    })
}

fn run_one(resolved: &Resolved, dir: &Path, method: Method, seed: u64) -> Result<SeedSummary, RunError> {
    let cfg = &resolved.config;
    let train = cfg
        .train_config(method, seed)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let (stream, test) = cfg
        .build_stream(&resolved.base_dir, seed)
        .map_err(|e| RunError::Config(format!("dataset: {e}")))?;
    let out_dir = seed_dir(dir, method, seed);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let opts = RunOptions {
        checkpoint_dir: cfg.save_checkpoints.then(|| out_dir.join("checkpoints")),
    };
    log::info!("running {method} seed {seed}");
    let outcome = run_stream_with(&train, &stream, &test, &opts).map_err(|source| match source {
        Error::Divergence { .. } => RunError::Divergence { method, seed, source },
        source => RunError::Training { method, seed, source },
    })?;
    let summary = summarize(&resolved.hash, method, seed, &outcome).map_err(|source| RunError::Training {
        method,
        seed,
        source,
    })?;
    write_outputs(&resolved.hash, &out_dir, &summary, &outcome)?;
    if cfg.dump_embeddings {
        write_embeddings(&resolved.hash, &out_dir.join("embeddings.csv"), &outcome, &test)?;
    }
    log::info!("{method} seed {seed}: ACC {:.4}", summary.acc);
    Ok(summary)
}

fn summarize(hash: &str, method: Method, seed: u64, out: &RunOutcome) -> nncsl_core::Result<SeedSummary> {
    let m = out.matrix.summary()?;
    let t = out.matrix.tasks();
    let labeled: Vec<f64> = out.task_logs.iter().map(|l| l.labeled_train_accuracy).collect();
    Ok(SeedSummary {
        config_hash: hash.to_string(),
        method,
        seed,
        acc: m.acc,
        fwt: m.fwt,
        bwt: m.bwt,
        bwt_excluding_first: m.bwt_excluding_first,
        per_task_final: m.per_task_final,
        mean_labeled_train_accuracy: labeled.iter().sum::<f64>() / labeled.len() as f64,
        labeled_train_accuracy: labeled,
        matrix: (0..t).map(|i| (0..t).map(|j| out.matrix.get(i, j)).collect()).collect(),
        random_init: (0..t).map(|j| out.matrix.random(j)).collect(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, RunError> {
    csv::Writer::from_path(path).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_outputs(hash: &str, dir: &Path, s: &SeedSummary, out: &RunOutcome) -> Result<(), RunError> {
    let path = dir.join("matrix.csv");
    let mut w = csv_writer(&path)?;
    let err = csv_io(&path);
    w.write_record(["config_hash", "after_task", "eval_task", "accuracy", "random_init"])
        .map_err(&err)?;
    for (i, row) in s.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            w.write_record([
                hash.to_string(),
                (i + 1).to_string(),
                (j + 1).to_string(),
                fmt_opt(*v),
                fmt_opt(s.random_init[j]),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("learning_curve.csv");
    let mut w = csv_writer(&path)?;
    let err = csv_io(&path);
    w.write_record(["config_hash", "task", "epoch", "mean_loss", "unlabeled_train_accuracy"])
        .map_err(&err)?;
    for e in out.task_logs.iter().flat_map(|l| &l.epochs) {
        w.write_record([
            hash.to_string(),
            e.task.to_string(),
            e.epoch.to_string(),
            e.mean_loss.to_string(),
            fmt_opt(e.unlabeled_accuracy),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(io_err(&path))?;

    write_json(&dir.join("summary.json"), s)
}

fn write_embeddings(
    hash: &str,
    path: &Path,
    out: &RunOutcome,
    test: &nncsl_core::data::Dataset,
) -> Result<(), RunError> {
    let (_, z, _) = out.model.infer(test.features()).map_err(|source| RunError::Report {
        path: path.to_path_buf(),
        message: source.to_string(),
    })?;
    let mut w = csv_writer(path)?;
    let err = csv_io(path);
    let mut header = vec!["config_hash".to_string(), "sample_id".into(), "class".into()];
    header.extend((0..z.cols()).map(|k| format!("z{k}")));
    w.write_record(&header).map_err(&err)?;
    for i in 0..z.rows() {
        let mut rec = vec![hash.to_string(), i.to_string(), test.labels()[i].to_string()];
        rec.extend(z.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Re-aggregates the per-seed summaries found under `run_dir`.
pub fn report(run_dir: &Path) -> Result<Vec<MethodSummary>, RunError> {
    let mut out = Vec::new();
    let mut method_dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(io_err(run_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    method_dirs.sort();
    for mdir in method_dirs {
        let mut seed_dirs: Vec<PathBuf> = fs::read_dir(&mdir)
            .map_err(io_err(&mdir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").is_file())
            .collect();
        seed_dirs.sort();
        let mut runs = Vec::new();
        for sd in seed_dirs {
            let path = sd.join("summary.json");
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let s: SeedSummary = serde_json::from_str(&text).map_err(|e| RunError::Report {
                path: path.clone(),
                message: e.to_string(),
            })?;
            runs.push(s);
        }
        runs.sort_by_key(|r| r.seed);
        if let Some(summary) = aggregate(&runs) {
            write_json(&mdir.join("summary.json"), &summary)?;
            out.push(summary);
        }
    }
    if out.is_empty() {
        return Err(RunError::Report {
            path: run_dir.to_path_buf(),
            message: "no per-seed summaries found".into(),
        });
    }
    Ok(out)
}

fn fmt_stat(s: Option<Stat>) -> String {
    s.map(|s| format!("{:.4} ± {:.4}", s.mean, s.std)).unwrap_or_else(|| "n/a".into())
}

/// Plain-text table of method summaries.
pub fn format_table(rows: &[MethodSummary]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>18} {:>18} {:>18}\n",
        "method", "seeds", "ACC", "FWT", "BWT"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>6} {:>18} {:>18} {:>18}\n",
            r.method.name(),
            r.seeds.len(),
            fmt_stat(Some(r.acc)),
            fmt_stat(r.fwt),
            fmt_stat(r.bwt)
        );
    }
    s
}

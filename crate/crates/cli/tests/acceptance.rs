//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nncsl_cli::config::{config_hash, DatasetSpec, ExperimentConfig, Resolved, SyntheticSpec};
use nncsl_cli::run::{run_experiment, ExperimentOutcome, MethodSummary, Stat};
use nncsl_core::data::{one_hot, seeded_rng};
use nncsl_core::gradcheck::{loss_suite, SUITE_LOSSES};
use nncsl_core::snn::{filter_support, snn_classify, FilterMode, SupportSet};
use nncsl_core::{Error, Graph, Method, ResultMatrix, Tensor};
use rand::Rng;
use tempfile::TempDir;

type Check = fn(&Path) -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 10] = [
        ("gradient suite", gradient_suite),
        ("snn oracle", snn_oracle),
        ("support filtering", support_filtering),
        ("filtering ablation", filtering_ablation),
        ("distillation comparison", distillation_comparison),
        ("buffer ablation", buffer_ablation),
        ("linear weight overfitting", linear_weight_overfitting),
        ("distillation weight sweep", distillation_weight_sweep),
        ("metric formulas", metric_formulas),
        ("determinism", determinism),
    ];
    let root = TempDir::new().expect("temp dir");
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(root.path())))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.1} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {detail} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite(_: &Path) -> Result<String, String> {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        let reports = loss_suite(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        if reports.len() != SUITE_LOSSES.len() {
            return Err(format!("seed {seed}: {} losses checked", reports.len()));
        }
        for (loss, r) in reports {
            if !(r.max_rel_error <= worst.0) {
                worst = (r.max_rel_error, format!("{loss} seed {seed} {}", r.worst));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 30.0,
        format!(
            "{} losses × 20 seeds, worst relative error {:.2e} ({}), {secs:.1} s",
            SUITE_LOSSES.len(),
            worst.0,
            worst.1
        ),
    )
}

fn random_simplex_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        data.extend(w.iter().map(|x| x / s));
    }
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn brute_force_snn(queries: &Tensor, support: &Tensor, targets: &Tensor, temp: f64) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            let logits: Vec<f64> = (0..support.rows())
                .map(|k| {
                    let s = support.row(k);
                    let dot: f64 = q.iter().zip(s).map(|(a, b)| a * b).sum();
                    dot / (norm(q) * norm(s)) / temp
                })
                .collect();
            let weights: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let z: f64 = weights.iter().sum();
            (0..targets.cols())
                .map(|c| (0..support.rows()).map(|k| weights[k] / z * targets.get(k, c)).sum())
                .collect()
        })
        .collect()
}

fn snn_oracle(_: &Path) -> Result<String, String> {
    let mut rng = seeded_rng(2024, 0);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for k in 1..=5 {
        for q in 1..=4 {
            for dim in 1..=4 {
                for _ in 0..10 {
                    let classes = rng.random_range(1..=4);
                    let temp = rng.random_range(0.05..1.0);
                    let mut m = |r: usize| {
                        let data = (0..r * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                        Tensor::matrix(r, dim, data).expect("sized")
                    };
                    let (queries, support) = (m(q), m(k));
                    let targets = random_simplex_rows(&mut rng, k, classes);
                    let want = brute_force_snn(&queries, &support, &targets, temp);
                    let mut g = Graph::new();
                    let qv = g.constant(queries);
                    let sv = g.constant(support);
                    let set = SupportSet::new(&g, sv, targets, vec![0; k], vec![0; k]).map_err(|e| e.to_string())?;
                    let got = snn_classify(&mut g, qv, &set, temp).map_err(|e| e.to_string())?;
                    let got = g.value(got.distribution);
                    for (i, row) in want.iter().enumerate() {
                        for (c, w) in row.iter().enumerate() {
                            worst = worst.max((got.get(i, c) - w).abs());
                        }
                    }
                    instances += 1;
                }
            }
        }
    }
    verdict(
        worst < 1e-10,
        format!("{instances} instances with K ≤ 5, q ≤ 4, worst abs error {worst:.2e}"),
    )
}

fn support_filtering(_: &Path) -> Result<String, String> {
    let mut rng = seeded_rng(7, 0);
    let mut violations = 0;
    let mut retained = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=24);
        let tasks = rng.random_range(1..=6);
        let current = rng.random_range(0..tasks);
        let tags: Vec<usize> = (0..k).map(|_| rng.random_range(0..tasks)).collect();
        let classes: Vec<usize> = tags.iter().map(|&t| 2 * t + rng.random_range(0..2)).collect();
        let features: Vec<f64> = (0..k * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = Tensor::matrix(k, 3, features).expect("sized");
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let set = SupportSet::new(&g, f, one_hot(&classes, 2 * tasks), tags.clone(), classes.clone())
            .map_err(|e| e.to_string())?;
        for mode in [FilterMode::CurrentOnly, FilterMode::PreviousOnly] {
            let wanted = |t: usize| match mode {
                FilterMode::CurrentOnly => t == current,
                FilterMode::PreviousOnly => t < current,
            };
            let expected: Vec<usize> = (0..k).filter(|&i| wanted(tags[i])).collect();
            match filter_support(&mut g, &set, current, mode) {
                Ok(out) => {
                    retained += out.len();
                    let rows = g.value(out.features);
                    for (pos, &id) in out.sample_ids.iter().enumerate() {
                        if !wanted(tags[id]) || out.task_tags[pos] != tags[id] || rows.row(pos) != features.row(id) {
                            violations += 1;
                        }
                    }
                    if out.sample_ids != expected {
                        violations += 1;
                    }
                }
                Err(Error::EmptyFilter) if expected.is_empty() => {}
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    verdict(
        violations == 0,
        format!("1000 random supports, {retained} rows retained, {violations} violations"),
    )
}

/// 5-task, 10-class Gaussian blob stream shared by the training checks.
fn blob_config(methods: &[Method], seeds: std::ops::Range<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            dim: 4,
            noise: 0.3,
            ..SyntheticSpec::default()
        }),
        num_tasks: 5,
        label_ratio: 0.05,
        buffer_capacity: 50,
        methods: methods.to_vec(),
        seeds: seeds.collect(),
        ..ExperimentConfig::default()
    }
}

fn run(config: ExperimentConfig, root: &Path) -> Result<ExperimentOutcome, String> {
    let violations = config.violations(Path::new("."));
    if !violations.is_empty() {
        return Err(format!("invalid config: {violations:?}"));
    }
    let hash = config_hash(&config);
    let resolved = Resolved {
        config,
        base_dir: PathBuf::from("."),
        hash,
    };
    run_experiment(&resolved, root).map_err(|e| e.to_string())
}

fn summaries(outcome: &ExperimentOutcome) -> BTreeMap<Method, &MethodSummary> {
    outcome.methods.iter().map(|m| (m.method, m)).collect()
}

fn pct(s: &Stat) -> String {
    format!("{:.1}±{:.1}", 100.0 * s.mean, 100.0 * s.std)
}

fn filtering_ablation(root: &Path) -> Result<String, String> {
    let start = Instant::now();
    let out = run(blob_config(&[Method::Nncsl, Method::Csl, Method::Paws], 0..5), root)?;
    let secs = start.elapsed().as_secs_f64();
    let s = summaries(&out);
    let (nncsl, csl, paws) = (&s[&Method::Nncsl].acc, &s[&Method::Csl].acc, &s[&Method::Paws].acc);
    let ok = nncsl.mean - csl.mean >= 0.02 && csl.mean - paws.mean >= 0.02 && secs < 600.0;
    verdict(
        ok,
        format!(
            "ACC nncsl {} csl {} paws {} (need gaps ≥ 2 points), {secs:.0} s",
            pct(nncsl),
            pct(csl),
            pct(paws)
        ),
    )
}

fn distillation_comparison(root: &Path) -> Result<String, String> {
    let methods = [Method::Nncsl, Method::CslKd, Method::CslFd];
    let out = run(blob_config(&methods, 0..5), root)?;
    let s = summaries(&out);
    let first = |m: Method| &s[&m].per_task_final[0];
    let (nnd, kd, fd) = (first(Method::Nncsl), first(Method::CslKd), first(Method::CslFd));
    verdict(
        nnd.mean >= kd.mean && nnd.mean >= fd.mean,
        format!("final task-1 accuracy nnd {} kd {} feature {}", pct(nnd), pct(kd), pct(fd)),
    )
}

fn buffer_ablation(root: &Path) -> Result<String, String> {
    let sizes = [0usize, 8, 32, 128];
    let mut accs = Vec::new();
    for &m in &sizes {
        let mut cfg = blob_config(&[Method::Nncsl], 0..5);
        cfg.buffer_capacity = m;
        let out = run(cfg, root)?;
        accs.push(out.methods[0].acc.clone());
    }
    // A step counts as non-decreasing unless it drops by more than the
    // standard error of the difference of the two means.
    let n = 5.0;
    let monotone = accs.windows(2).all(|w| {
        let se = ((w[0].std.powi(2) + w[1].std.powi(2)) / n).sqrt();
        w[1].mean >= w[0].mean - se
    });
    let gap = accs[3].mean - accs[0].mean;
    let detail: Vec<String> = sizes.iter().zip(&accs).map(|(m, a)| format!("M={m} {}", pct(a))).collect();
    verdict(
        monotone && gap >= 0.15,
        format!("ACC {} (gap {:.1} points, need ≥ 15)", detail.join(", "), 100.0 * gap),
    )
}

fn linear_weight_overfitting(root: &Path) -> Result<String, String> {
    let mut rows = Vec::new();
    for lambda in [1.0, 0.005] {
        let mut cfg = blob_config(&[Method::Nncsl], 0..3);
        cfg.train.lambda_lin = lambda;
        let out = run(cfg, root)?;
        let m = &out.methods[0];
        rows.push((lambda, m.labeled_train_accuracy.clone(), m.acc.clone()));
    }
    let (heavy, light) = (&rows[0], &rows[1]);
    verdict(
        heavy.1.mean > light.1.mean && light.2.mean >= heavy.2.mean,
        format!(
            "λ=1: train {} held-out {}; λ=0.005: train {} held-out {}",
            pct(&heavy.1),
            pct(&heavy.2),
            pct(&light.1),
            pct(&light.2)
        ),
    )
}

fn distillation_weight_sweep(root: &Path) -> Result<String, String> {
    let mut accs = Vec::new();
    for lambda in [0.0, 0.2, 5.0] {
        let mut cfg = blob_config(&[Method::Nncsl], 0..3);
        cfg.train.lambda_nnd = lambda;
        accs.push((lambda, run(cfg, root)?.methods[0].acc.clone()));
    }
    let mid = accs[1].1.mean;
    verdict(
        mid >= accs[0].1.mean && mid >= accs[2].1.mean,
        accs.iter()
            .map(|(l, a)| format!("λ={l} {}", pct(a)))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn metric_formulas(_: &Path) -> Result<String, String> {
    let e = |x: nncsl_core::Result<f64>| x.map_err(|e| e.to_string());
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{name} {got} ≠ {want}"));
        }
    };
    // Values are dyadic so every sum and quotient below is exact.
    let m = ResultMatrix::from_rows(
        vec![
            vec![0.75, 0.25, 0.125],
            vec![0.5, 0.875, 0.375],
            vec![0.25, 0.625, 1.0],
        ],
        vec![0.0, 0.125, 0.25],
    )
    .map_err(|e| e.to_string())?;
    expect("ACC", e(m.acc())?, (0.25 + 0.625 + 1.0) / 3.0);
    expect("FWT", e(m.fwt())?, ((0.25 - 0.125) + (0.375 - 0.25)) / 2.0);
    expect("BWT", e(m.bwt(false))?, ((0.25 - 0.75) + (0.625 - 0.875)) / 2.0);
    expect("BWT without task 1", e(m.bwt(true))?, 0.625 - 0.875);

    let keep = ResultMatrix::from_rows(
        vec![vec![0.5, 0.0, 0.0], vec![0.5, 0.75, 0.0], vec![0.5, 0.75, 0.25]],
        vec![0.0; 3],
    )
    .map_err(|e| e.to_string())?;
    expect("no-forgetting BWT", e(keep.bwt(false))?, 0.0);

    let chance = ResultMatrix::from_rows(
        vec![vec![0.5, 0.5, 0.25], vec![0.5, 0.5, 0.25], vec![0.5, 0.5, 0.25]],
        vec![0.5, 0.5, 0.25],
    )
    .map_err(|e| e.to_string())?;
    expect("chance FWT", e(chance.fwt())?, 0.0);
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "ACC, FWT and BWT exact on three fixed 3×3 matrices".into()
        } else {
            failures.join("; ")
        },
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Result<String, String> {
    let mut cfg = blob_config(&[Method::Nncsl, Method::Er], 0..2);
    cfg.num_tasks = 2;
    cfg.train.epochs_per_task = 5;
    cfg.dump_embeddings = true;
    let a = run(cfg.clone(), &root.join("first"))?;
    let b = run(cfg, &root.join("second"))?;
    let (fa, fb) = (csv_files(&a.run_dir), csv_files(&b.run_dir));
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(format!("{} vs {} CSV files", fa.len(), fb.len()));
    }
    let mut differing = Vec::new();
    for (x, y) in fa.iter().zip(&fb) {
        let rel = x.strip_prefix(&a.run_dir).unwrap_or(x);
        if y.strip_prefix(&b.run_dir).ok() != Some(rel) || std::fs::read(x).ok() != std::fs::read(y).ok() {
            differing.push(rel.display().to_string());
        }
    }
    verdict(
        differing.is_empty(),
        format!("{} CSV files compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

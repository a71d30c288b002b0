//! Datasets, class-incremental task streams and multi-view augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic RNG for `seed`, on an independent sub-stream per purpose.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Parameter("dataset has no samples".into()));
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// Stratified holdout: moves `fraction` of every class (at least one
    /// sample when the class has two or more) into the second dataset.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Parameter(format!(
                "holdout fraction must be in (0, 1), got {fraction}"
            )));
        }
        let mut rng = seeded_rng(seed, 11);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.class_count {
            let mut idx = self.indices_of_class(c);
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let mut n_test = (idx.len() as f64 * fraction).round() as usize;
            if idx.len() >= 2 {
                n_test = n_test.clamp(1, idx.len() - 1);
            } else {
                n_test = 0;
            }
            let (te, tr) = idx.split_at(n_test);
            test.extend_from_slice(te);
            train.extend_from_slice(tr);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Splits off the first `test_per_class` samples of each class.
    pub fn split_per_class(&self, test_per_class: usize) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.class_count {
            let idx = self.indices_of_class(c);
            if idx.len() <= test_per_class {
                return Err(Error::Split(format!(
                    "class {c} has {} samples, cannot hold out {test_per_class}",
                    idx.len()
                )));
            }
            test.extend_from_slice(&idx[..test_per_class]);
            train.extend_from_slice(&idx[test_per_class..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs,
    ConcentricRings,
}

/// Generates a balanced synthetic dataset.
///
/// Blob means are drawn once from a standard normal (so their geometry only
/// depends on `seed` and `dim`), then every sample adds isotropic noise of
/// standard deviation `noise`. Rings put class `c` on a sphere of radius
/// `c + 1`.
pub fn make_synthetic(
    kind: SyntheticKind,
    classes: usize,
    per_class: usize,
    dim: usize,
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 4 || dim < 2 {
        return Err(Error::Parameter(format!(
            "need classes >= 2, per_class >= 4, dim >= 2 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Parameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut center_rng = seeded_rng(seed, 1);
    let mut rng = seeded_rng(seed, 2);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    match kind {
        SyntheticKind::GaussianBlobs => {
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..dim)
                        .map(|_| StandardNormal.sample(&mut center_rng))
                        .collect()
                })
                .collect();
            for (c, mean) in means.iter().enumerate() {
                for _ in 0..per_class {
                    for &m in mean {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(m + noise * z);
                    }
                    labels.push(c);
                }
            }
        }
        SyntheticKind::ConcentricRings => {
            for c in 0..classes {
                let radius = (c + 1) as f64;
                for _ in 0..per_class {
                    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    for x in dir {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(radius * x / n + noise * z);
                    }
                    labels.push(c);
                }
            }
        }
    }
    Dataset::new(
        Tensor::matrix(classes * per_class, dim, data)?,
        labels,
        classes,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<usize>,
    /// Dataset indices of the labeled subset.
    pub labeled: Vec<usize>,
    /// Dataset indices of the unlabeled subset.
    pub unlabeled: Vec<usize>,
}

impl Task {
    pub fn contains_class(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Ordered disjoint class-incremental tasks over one training dataset.
#[derive(Clone, Debug)]
pub struct TaskStream {
    dataset: Dataset,
    tasks: Vec<Task>,
    label_ratio: f64,
}

impl TaskStream {
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn label_ratio(&self) -> f64 {
        self.label_ratio
    }

    pub fn class_count(&self) -> usize {
        self.dataset.class_count()
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains_class(class))
    }

    /// Indices of `eval` samples belonging to task `t`'s classes.
    pub fn eval_indices(&self, t: usize, eval: &Dataset) -> Vec<usize> {
        let task = &self.tasks[t];
        (0..eval.len())
            .filter(|&i| task.contains_class(eval.labels()[i]))
            .collect()
    }
}

/// Number of labeled samples drawn from a class of `n` samples.
pub fn labeled_count(n: usize, label_ratio: f64) -> usize {
    ((n as f64) * label_ratio).round() as usize
}

/// Splits `dataset` into `num_tasks` equal disjoint class groups (in class-id
/// order) and, per class, draws a uniform random labeled subset.
pub fn split_stream(
    dataset: Dataset,
    num_tasks: usize,
    label_ratio: f64,
    seed: u64,
) -> Result<TaskStream> {
    let classes = dataset.class_count();
    if num_tasks == 0 || classes % num_tasks != 0 {
        return Err(Error::Protocol(format!(
            "{classes} classes cannot be divided into {num_tasks} equal tasks"
        )));
    }
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::Split(format!(
            "label ratio must be in (0, 1], got {label_ratio}"
        )));
    }
    let per_task = classes / num_tasks;
    let mut rng = seeded_rng(seed, 3);
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let task_classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
        for &c in &task_classes {
            let mut idx = dataset.indices_of_class(c);
            let n_lab = labeled_count(idx.len(), label_ratio);
            if n_lab == 0 {
                return Err(Error::Split(format!(
                    "label ratio {label_ratio} leaves class {c} ({} samples) without labels",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            labeled.extend_from_slice(&idx[..n_lab]);
            unlabeled.extend_from_slice(&idx[n_lab..]);
        }
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        tasks.push(Task {
            index: t,
            classes: task_classes,
            labeled,
            unlabeled,
        });
    }
    Ok(TaskStream {
        dataset,
        tasks,
        label_ratio,
    })
}

/// A labeled sample as it travels through batches and the replay buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub features: Vec<f64>,
    pub class: usize,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian jitter on global views.
    pub jitter: f64,
    /// Per-coordinate zeroing probability on global views.
    pub dropout: f64,
    pub local_views: usize,
    pub local_jitter: f64,
    pub local_dropout: f64,
    /// Whether labeled rows are augmented like a global view.
    pub augment_labeled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: 0.1,
            dropout: 0.1,
            local_views: 2,
            local_jitter: 0.2,
            local_dropout: 0.3,
            augment_labeled: true,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            jitter: 0.0,
            dropout: 0.0,
            local_views: 0,
            local_jitter: 0.0,
            local_dropout: 0.0,
            augment_labeled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("dropout", self.dropout), ("local_dropout", self.local_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        for (name, s) in [("jitter", self.jitter), ("local_jitter", self.local_jitter)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Labeled rows of a batch: current-task rows first, then replayed rows.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub features: Tensor,
    /// One-hot rows over all stream classes.
    pub targets: Tensor,
    pub ids: Vec<usize>,
    pub class_tags: Vec<usize>,
    pub task_tags: Vec<usize>,
    pub replayed: Vec<bool>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn current_count(&self) -> usize {
        self.replayed.iter().filter(|&&r| !r).count()
    }
}

#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub unlabeled_ids: Vec<usize>,
    /// The two global views of every unlabeled sample.
    pub global: [Tensor; 2],
    pub locals: Vec<Tensor>,
    pub labeled: LabeledBatch,
}

impl ViewBatch {
    pub fn global_view_count(&self) -> usize {
        self.global.iter().map(|g| g.rows()).sum()
    }
}

pub fn one_hot(classes: &[usize], class_count: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![classes.len(), class_count]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * class_count + c] = 1.0;
    }
    t
}

fn augment_row<R: Rng>(src: &[f64], jitter: f64, dropout: f64, rng: &mut R, out: &mut Vec<f64>) {
    for &x in src {
        let mut v = x;
        if jitter > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v += jitter * z;
        }
        if dropout > 0.0 && rng.random::<f64>() < dropout {
            v = 0.0;
        }
        out.push(v);
    }
}

fn augment_matrix<R: Rng>(rows: &[&[f64]], dim: usize, jitter: f64, dropout: f64, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        augment_row(r, jitter, dropout, rng, &mut data);
    }
    Tensor::new(vec![rows.len(), dim], data).expect("rows have uniform width")
}

/// Builds the multi-view batch: two global views of every unlabeled sample,
/// optional heavier-augmented local views, and the labeled rows.
pub fn augment_views<R: Rng>(
    unlabeled: &[(usize, &[f64])],
    labeled: &[LabeledSample],
    replayed_from: usize,
    class_count: usize,
    dim: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewBatch> {
    cfg.validate()?;
    let rows: Vec<&[f64]> = unlabeled.iter().map(|(_, r)| *r).collect();
    let global = [
        augment_matrix(&rows, dim, cfg.jitter, cfg.dropout, rng),
        augment_matrix(&rows, dim, cfg.jitter, cfg.dropout, rng),
    ];
    let locals = (0..cfg.local_views)
        .map(|_| augment_matrix(&rows, dim, cfg.local_jitter, cfg.local_dropout, rng))
        .collect();
    let lab_rows: Vec<&[f64]> = labeled.iter().map(|s| s.features.as_slice()).collect();
    let features = if cfg.augment_labeled {
        augment_matrix(&lab_rows, dim, cfg.jitter, cfg.dropout, rng)
    } else {
        augment_matrix(&lab_rows, dim, 0.0, 0.0, rng)
    };
    let class_tags: Vec<usize> = labeled.iter().map(|s| s.class).collect();
    Ok(ViewBatch {
        unlabeled_ids: unlabeled.iter().map(|(i, _)| *i).collect(),
        global,
        locals,
        labeled: LabeledBatch {
            features,
            targets: one_hot(&class_tags, class_count),
            ids: labeled.iter().map(|s| s.id).collect(),
            task_tags: labeled.iter().map(|s| s.task).collect(),
            replayed: (0..labeled.len()).map(|i| i >= replayed_from).collect(),
            class_tags,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Per-column standardization fitted on one split and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    const VARIANCE_FLOOR: f64 = 1e-12;

    pub fn fit(d: &Dataset) -> Self {
        let (n, dim) = (d.len() as f64, d.dim());
        let mut means = vec![0.0; dim];
        for i in 0..d.len() {
            for (m, x) in means.iter_mut().zip(d.sample(i)) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; dim];
        for i in 0..d.len() {
            for ((v, x), m) in vars.iter_mut().zip(d.sample(i)).zip(&means) {
                *v += (x - m) * (x - m);
            }
        }
        let stds = vars
            .into_iter()
            .map(|v| {
                let v = v / n;
                if v < Self::VARIANCE_FLOOR {
                    1.0
                } else {
                    v.sqrt()
                }
            })
            .collect();
        Self { means, stds }
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let dim = d.dim();
        let mut data = d.features().data().to_vec();
        for row in data.chunks_mut(dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.means).zip(&self.stds) {
                *x = (*x - m) / s;
            }
        }
        Dataset::new(
            Tensor::matrix(d.len(), dim, data)?,
            d.labels().to_vec(),
            d.class_count(),
        )
    }
}

/// Reads a CSV without standardizing. Integer labels are used as class ids;
/// any other labels are coded by their sorted order.
pub fn load_csv_raw(path: &Path, has_header: bool, label_column: &LabelColumn) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingestion {
            row: 0,
            message: e.to_string(),
        })?;
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::Ingestion {
                    row: 0,
                    message: format!("label column {name:?} given by name but file has no header"),
                });
            }
            let headers = reader.headers().map_err(|e| Error::Ingestion {
                row: 1,
                message: e.to_string(),
            })?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Ingestion {
                    row: 1,
                    message: format!("unknown label column {name:?}"),
                })?
        }
    };
    let first_row = if has_header { 2 } else { 1 };
    let mut width = None;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = first_row + i;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            message: e.to_string(),
        })?;
        match width {
            None => {
                if label_idx >= rec.len() {
                    return Err(Error::Ingestion {
                        row,
                        message: format!("unknown label column index {label_idx}"),
                    });
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(Error::Ingestion {
                    row,
                    message: format!("ragged row: {} fields, expected {w}", rec.len()),
                });
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(field.to_string());
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Ingestion {
                    row,
                    message: format!("non-numeric feature {field:?} in column {j}"),
                })?;
                data.push(v);
            }
        }
    }
    let width = width.ok_or(Error::Ingestion {
        row: first_row,
        message: "no data rows".into(),
    })?;
    if width < 2 {
        return Err(Error::Ingestion {
            row: first_row,
            message: "need at least one feature column besides the label".into(),
        });
    }
    let (labels, class_count) = code_labels(&raw_labels);
    Dataset::new(
        Tensor::matrix(raw_labels.len(), width - 1, data)?,
        labels,
        class_count,
    )
}

fn code_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let ints: Option<Vec<usize>> = raw.iter().map(|s| s.parse().ok()).collect();
    if let Some(ints) = ints {
        let count = ints.iter().max().map_or(0, |m| m + 1);
        return (ints, count);
    }
    let codes: BTreeMap<&str, usize> = {
        let mut uniq: Vec<&str> = raw.iter().map(String::as_str).collect();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let labels = raw.iter().map(|s| codes[s.as_str()]).collect();
    (labels, codes.len())
}

/// Reads a CSV and standardizes every feature column over the whole file.
pub fn load_csv(path: &Path, has_header: bool, label_column: &LabelColumn) -> Result<Dataset> {
    let raw = load_csv_raw(path, has_header, label_column)?;
    Standardizer::fit(&raw).apply(&raw)
}

/// Writes features followed by a `label` column, with a header row.
pub fn export_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.sample(i).iter().map(|x| x.to_string()).collect();
        rec.push(d.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

//! Experiment configuration: JSON schema with full defaulting, validation
//! and the resolved-config hash.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nncsl_core::data::{
    labeled_count, load_csv_raw, make_synthetic, split_stream, Dataset, LabelColumn, Standardizer, SyntheticKind,
    TaskStream,
};
use nncsl_core::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// A configuration problem with the JSON path of the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: SyntheticKind,
    pub classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Held-out evaluation samples per class.
    pub test_per_class: usize,
    pub dim: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: SyntheticKind::GaussianBlobs,
            classes: 10,
            per_class: 300,
            test_per_class: 100,
            dim: 16,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub has_header: bool,
    #[serde(default = "default_label_column")]
    pub label_column: LabelColumn,
    /// Stratified fraction held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn yes() -> bool {
    true
}

fn default_label_column() -> LabelColumn {
    LabelColumn::Name("label".into())
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv(CsvSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub num_tasks: usize,
    pub label_ratio: f64,
    pub buffer_capacity: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Fixes the generated data and the split across seeds; by default each
    /// seed draws its own.
    pub data_seed: Option<u64>,
    pub train: TrainConfig,
    /// Per-method partial overrides of `train`.
    pub method_overrides: BTreeMap<Method, Value>,
    pub output_dir: PathBuf,
    pub dump_embeddings: bool,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            num_tasks: 5,
            label_ratio: 0.05,
            buffer_capacity: 50,
            methods: vec![Method::Nncsl],
            seeds: vec![0],
            data_seed: None,
            train: TrainConfig::default(),
            method_overrides: default_method_overrides(),
            output_dir: PathBuf::from("runs"),
            dump_embeddings: false,
            save_checkpoints: false,
        }
    }
}

/// Purely supervised baselines train the linear head at full weight, which
/// needs a smaller step than the consistency objectives. Entries given in a
/// config file replace these per method.
fn default_method_overrides() -> BTreeMap<Method, Value> {
    let slow = serde_json::json!({"base_lr": 0.01, "peak_lr": 0.05, "final_lr": 0.001});
    BTreeMap::from([(Method::Finetune, slow.clone()), (Method::Er, slow)])
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub dump_embeddings: bool,
}

/// A parsed, defaulted configuration plus its hash.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    /// Directory of the config file; base for relative dataset paths.
    pub base_dir: PathBuf,
    pub hash: String,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut c: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().to_string())
        })?;
        for (m, patch) in default_method_overrides() {
            c.method_overrides.entry(m).or_insert(patch);
        }
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.methods.is_empty() {
            self.methods = o.methods.clone();
        }
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        self.dump_embeddings |= o.dump_embeddings;
    }

    /// Training configuration for one method and seed.
    pub fn train_config(&self, method: Method, seed: u64) -> Result<TrainConfig, ConfigError> {
        let mut value = serde_json::to_value(&self.train).expect("train config serializes");
        let mut path = "train".to_string();
        if let Some(patch) = self.method_overrides.get(&method) {
            if !patch.is_object() {
                return Err(ConfigError::new(
                    format!("method_overrides.{method}"),
                    "expected an object of train fields",
                ));
            }
            merge(&mut value, patch);
            path = format!("method_overrides.{method}");
        }
        let mut cfg: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let inner = e.path().to_string();
            ConfigError::new(format!("{path}.{inner}"), e.into_inner().to_string())
        })?;
        cfg.method = method;
        cfg.seed = seed;
        cfg.buffer_capacity = self.buffer_capacity;
        Ok(cfg)
    }

    fn data_seed_for(&self, seed: u64) -> u64 {
        self.data_seed.unwrap_or(seed)
    }

    /// Every violated constraint; empty means the config is runnable.
    pub fn violations(&self, base_dir: &Path) -> Vec<ConfigError> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push(ConfigError::new("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            v.push(ConfigError::new("methods", "at least one method is required"));
        }
        if self.num_tasks == 0 {
            v.push(ConfigError::new("num_tasks", "must be >= 1"));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            v.push(ConfigError::new("label_ratio", format!("must be in (0, 1], got {}", self.label_ratio)));
        }
        match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                if !s.divisible_into(self.num_tasks) {
                    v.push(ConfigError::new(
                        "num_tasks",
                        format!("{} classes are not divisible into {} tasks", s.classes, self.num_tasks),
                    ));
                }
                if !s.label_ratio_ok(self.label_ratio) {
                    v.push(ConfigError::new(
                        "label_ratio",
                        format!(
                            "{} labels per class out of {}; need at least 1 and at least 1 unlabeled",
                            labeled_count(s.per_class, self.label_ratio),
                            s.per_class
                        ),
                    ));
                }
                if s.test_per_class == 0 {
                    v.push(ConfigError::new("dataset.test_per_class", "must be >= 1"));
                }
            }
            DatasetSpec::Csv(c) => {
                let p = base_dir.join(&c.path);
                if !p.is_file() {
                    v.push(ConfigError::new("dataset.path", format!("{} does not exist", p.display())));
                }
                if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
                    v.push(ConfigError::new(
                        "dataset.test_fraction",
                        format!("must be in (0, 1), got {}", c.test_fraction),
                    ));
                }
            }
        }
        for &m in &self.methods {
            match self.train_config(m, 0) {
                Ok(cfg) => {
                    let prefix = if self.method_overrides.contains_key(&m) {
                        format!("method_overrides.{m}")
                    } else {
                        "train".into()
                    };
                    for msg in cfg.violations() {
                        let (field, rest) = msg.split_once(": ").unwrap_or(("", &msg));
                        v.push(ConfigError::new(format!("{prefix}.{field}"), rest));
                    }
                }
                Err(e) => v.push(e),
            }
        }
        if v.is_empty() {
            if let Some(&seed) = self.seeds.first() {
                if let Err(e) = self.build_stream(base_dir, seed) {
                    v.push(ConfigError::new("dataset", e.to_string()));
                }
            }
        }
        let mut seen = Vec::new();
        v.retain(|e| {
            let key = e.to_string();
            let fresh = !seen.contains(&key);
            seen.push(key);
            fresh
        });
        v
    }

    /// Training stream and evaluation set for one seed.
    pub fn build_stream(&self, base_dir: &Path, seed: u64) -> nncsl_core::Result<(TaskStream, Dataset)> {
        let data_seed = self.data_seed_for(seed);
        let (train, test) = match &self.dataset {
            DatasetSpec::Synthetic(s) => {
                let all = make_synthetic(
                    s.shape,
                    s.classes,
                    s.per_class + s.test_per_class,
                    s.dim,
                    data_seed,
                    s.noise,
                )?;
                all.split_per_class(s.test_per_class)?
            }
            DatasetSpec::Csv(c) => {
                let raw = load_csv_raw(&base_dir.join(&c.path), c.has_header, &c.label_column)?;
                let (train, test) = raw.split_holdout(c.test_fraction, data_seed)?;
                let st = Standardizer::fit(&train);
                (st.apply(&train)?, st.apply(&test)?)
            }
        };
        let stream = split_stream(train, self.num_tasks, self.label_ratio, data_seed)?;
        Ok((stream, test))
    }
}

impl SyntheticSpec {
    fn divisible_into(&self, tasks: usize) -> bool {
        tasks > 0 && self.classes % tasks == 0
    }

    fn label_ratio_ok(&self, ratio: f64) -> bool {
        let n = labeled_count(self.per_class, ratio);
        n >= 1 && n < self.per_class
    }
}

/// Lowercase hex SHA-256 of the canonical JSON of `config`, ignoring where
/// outputs are written.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.output_dir = PathBuf::new();
    let canonical = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Reads, defaults, overrides and validates a config file.
pub fn resolve(path: &Path, overrides: &Overrides) -> Result<Resolved, Vec<ConfigError>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![ConfigError::new("", format!("cannot read {}: {e}", path.display()))])?;
    let mut config = ExperimentConfig::parse(&text).map_err(|e| vec![e])?;
    config.apply(overrides);
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let violations = config.violations(&base_dir);
    if !violations.is_empty() {
        return Err(violations);
    }
    let hash = config_hash(&config);
    Ok(Resolved { config, base_dir, hash })
}

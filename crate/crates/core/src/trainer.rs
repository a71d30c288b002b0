//! Task-wise training: replay buffer, batch composition, learning-rate
//! schedule, the per-method objectives and the full stream protocol.

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_views, seeded_rng, AugmentConfig, Dataset, LabeledSample, TaskStream, ViewBatch};
use crate::distill::{feature_distill_loss, kd_loss, loss_nncsl, nnd_loss, DistillBatch};
use crate::error::{Error, Result};
use crate::metrics::ResultMatrix;
use crate::model::{mask_logits, masked_argmax, snapshot_teacher, ModelConfig, ModelState, TeacherSnapshot};
use crate::snn::{
    filter_support, label_smooth, loss_csl, loss_lin, loss_mem, loss_snn_multi, CslParts, CslWeights,
    FilterMode, SupportSet,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Linear loss on current-task labels only, no replay.
    #[serde(rename = "finetune")]
    Finetune,
    /// Linear loss on current and replayed labels.
    #[serde(rename = "er")]
    Er,
    /// The base learner without support filtering.
    #[serde(rename = "paws")]
    Paws,
    #[serde(rename = "csl")]
    Csl,
    #[serde(rename = "nncsl")]
    Nncsl,
    #[serde(rename = "csl+kd")]
    CslKd,
    #[serde(rename = "csl+fd")]
    CslFd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Finetune,
        Method::Er,
        Method::Paws,
        Method::Csl,
        Method::Nncsl,
        Method::CslKd,
        Method::CslFd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Paws => "paws",
            Method::Csl => "csl",
            Method::Nncsl => "nncsl",
            Method::CslKd => "csl+kd",
            Method::CslFd => "csl+fd",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Method::Finetune | Method::Er)
    }

    pub fn uses_replay(self) -> bool {
        self != Method::Finetune
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Nncsl | Method::CslKd | Method::CslFd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub lambda_lin: f64,
    pub lambda_nnd: f64,
    pub lambda_mem: f64,
    pub label_smoothing: f64,
    pub eps: f64,
    pub tau: f64,
    pub kd_temperature: f64,
    pub epochs_per_task: usize,
    /// Defaults to 10 when `epochs_per_task >= 50`, else 20% of the budget.
    pub warmup_epochs: Option<usize>,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Current-task labeled rows per batch (class-balanced).
    pub labeled_batch: usize,
    /// Replayed rows per batch; also the size of the distillation support.
    pub buffer_batch: usize,
    pub unlabeled_batch: usize,
    pub buffer_capacity: usize,
    /// Capacity of the optional unlabeled replay store; zero disables it.
    pub unlabeled_buffer_capacity: usize,
    /// Precompute teacher embeddings of buffer samples once per task.
    pub teacher_feature_bank: bool,
    pub augment: AugmentConfig,
    pub backbone_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub projection_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Nncsl,
            seed: 0,
            lambda_lin: 0.005,
            lambda_nnd: 0.2,
            lambda_mem: 1.0,
            label_smoothing: 0.1,
            eps: 0.025,
            tau: 0.1,
            kd_temperature: 2.0,
            epochs_per_task: 20,
            warmup_epochs: None,
            base_lr: 0.08,
            peak_lr: 0.4,
            final_lr: 0.032,
            momentum: 0.9,
            weight_decay: 1e-5,
            labeled_batch: 8,
            buffer_batch: 8,
            unlabeled_batch: 32,
            buffer_capacity: 50,
            unlabeled_buffer_capacity: 0,
            teacher_feature_bank: false,
            augment: AugmentConfig::default(),
            backbone_widths: vec![64, 64],
            projector_hidden: 64,
            projection_dim: 16,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, as `field: message` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.eps > 0.0) {
            v.push(format!("eps: must be > 0, got {}", self.eps));
        }
        if !(self.tau > self.eps) {
            v.push(format!("tau: must exceed eps ({}), got {}", self.eps, self.tau));
        }
        for (name, w) in [
            ("lambda_lin", self.lambda_lin),
            ("lambda_nnd", self.lambda_nnd),
            ("lambda_mem", self.lambda_mem),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w >= 0.0) {
                v.push(format!("{name}: must be >= 0, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            v.push(format!("label_smoothing: must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum: must be in [0, 1), got {}", self.momentum));
        }
        if !(self.kd_temperature > 0.0) {
            v.push(format!("kd_temperature: must be > 0, got {}", self.kd_temperature));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("peak_lr", self.peak_lr), ("final_lr", self.final_lr)] {
            if !(lr >= 0.0) {
                v.push(format!("{name}: must be >= 0, got {lr}"));
            }
        }
        if self.epochs_per_task == 0 {
            v.push("epochs_per_task: must be >= 1".into());
        }
        if let Some(w) = self.warmup_epochs {
            if w > self.epochs_per_task {
                v.push(format!("warmup_epochs: {w} exceeds epochs_per_task"));
            }
        }
        if self.labeled_batch == 0 {
            v.push("labeled_batch: must be >= 1".into());
        }
        if self.method.uses_unlabeled() && self.unlabeled_batch == 0 {
            v.push("unlabeled_batch: must be >= 1".into());
        }
        if let Err(e) = self.augment.validate() {
            v.push(format!("augment: {e}"));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            v.push("backbone_widths: need at least one positive width".into());
        }
        if self.projector_hidden == 0 || self.projection_dim == 0 {
            v.push("projector_hidden/projection_dim: must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(first) => Err(Error::Parameter(first.clone())),
        }
    }

    pub fn warmup_epochs(&self) -> usize {
        self.warmup_epochs.unwrap_or(if self.epochs_per_task >= 50 {
            10
        } else {
            (self.epochs_per_task as f64 * 0.2).round() as usize
        })
    }

    pub fn model_config(&self, input_dim: usize, class_count: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            backbone_widths: self.backbone_widths.clone(),
            projector_hidden: self.projector_hidden,
            projection_dim: self.projection_dim,
            class_count,
        }
    }

    fn csl_weights(&self) -> CslWeights {
        CslWeights {
            mem: self.lambda_mem,
            lin: self.lambda_lin,
        }
    }
}

/// Bounded uniform-retention store of labeled samples (reservoir sampling
/// over every sample ever offered).
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<LabeledSample>,
    offered: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            offered: 0,
            rng: seeded_rng(seed, 31),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabeledSample] {
        &self.entries
    }

    pub fn offered(&self) -> usize {
        self.offered
    }

    fn offer(&mut self, s: LabeledSample) {
        self.offered += 1;
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(s);
        } else {
            let j = self.rng.random_range(0..self.offered);
            if j < self.capacity {
                self.entries[j] = s;
            }
        }
    }

    /// Uniform draw without replacement of up to `n` entries.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<LabeledSample> {
        self.entries.choose_multiple(rng, n.min(self.len())).cloned().collect()
    }
}

/// Offers `samples` to the buffer in a seed-determined random order.
pub fn update_buffer(buf: &mut ReplayBuffer, samples: impl IntoIterator<Item = LabeledSample>) {
    let mut samples: Vec<LabeledSample> = samples.into_iter().collect();
    samples.shuffle(&mut buf.rng);
    for s in samples {
        buf.offer(s);
    }
}

/// Reservoir of previously seen unlabeled samples (ids and features).
#[derive(Clone, Debug)]
pub struct UnlabeledStore {
    inner: ReplayBuffer,
}

impl UnlabeledStore {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            inner: ReplayBuffer::new(capacity, seed ^ 0x5eed),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn insert(&mut self, samples: impl IntoIterator<Item = LabeledSample>) {
        update_buffer(&mut self.inner, samples);
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<LabeledSample> {
        self.inner.sample(n, rng)
    }
}

fn labeled_sample(stream: &TaskStream, t: usize, idx: usize) -> LabeledSample {
    let d = stream.dataset();
    LabeledSample {
        id: idx,
        features: d.sample(idx).to_vec(),
        class: d.labels()[idx],
        task: t,
    }
}

/// Class-balanced draw of `k` labeled samples of task `t`.
fn draw_current_labeled<R: Rng>(stream: &TaskStream, t: usize, k: usize, rng: &mut R) -> Vec<LabeledSample> {
    let task = stream.task(t);
    let d = stream.dataset();
    let n_classes = task.classes.len();
    let mut out = Vec::with_capacity(k);
    let mut order = task.classes.clone();
    order.shuffle(rng);
    for (ci, &c) in order.iter().enumerate() {
        let quota = k / n_classes + usize::from(ci < k % n_classes);
        let pool: Vec<usize> = task.labeled.iter().copied().filter(|&i| d.labels()[i] == c).collect();
        if pool.is_empty() {
            continue;
        }
        let mut picked: Vec<usize> = pool.choose_multiple(rng, quota.min(pool.len())).copied().collect();
        while picked.len() < quota {
            picked.push(*pool.choose(rng).expect("non-empty pool"));
        }
        out.extend(picked.into_iter().map(|i| labeled_sample(stream, t, i)));
    }
    out
}

/// Builds one training batch for task `t` from the given unlabeled chunk, a
/// class-balanced draw of current labels and a uniform buffer draw.
pub fn compose_batch<R: Rng>(
    stream: &TaskStream,
    t: usize,
    unlabeled: &[usize],
    buf: Option<&ReplayBuffer>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ViewBatch> {
    let task = stream.task(t);
    if let Some(bad) = unlabeled.iter().find(|i| task.unlabeled.binary_search(i).is_err()) {
        return Err(Error::Protocol(format!(
            "sample {bad} is not an unlabeled sample of task {}",
            t + 1
        )));
    }
    let mut labeled = draw_current_labeled(stream, t, cfg.labeled_batch, rng);
    let k = labeled.len();
    if let Some(buf) = buf {
        labeled.extend(buf.sample(cfg.buffer_batch, rng));
    }
    let d = stream.dataset();
    let rows: Vec<(usize, &[f64])> = unlabeled.iter().map(|&i| (i, d.sample(i))).collect();
    augment_views(&rows, &labeled, k, d.class_count(), d.dim(), &cfg.augment, rng)
}

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay to `final_lr`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> f64 {
    if step < warmup_steps {
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / decay as f64).min(1.0);
    cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + gw + self.weight_decay * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Loss components of one step (NaN for absent terms).
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub snn: f64,
    pub mem: f64,
    pub lin: f64,
    pub distill: f64,
    pub total: f64,
}

impl fmt::Display for LossParts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "snn={} mem={} lin={} distill={} total={}",
            self.snn, self.mem, self.lin, self.distill, self.total
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Linear-head accuracy on the task's unlabeled training samples (monitoring only).
    pub unlabeled_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub labeled_train_accuracy: f64,
    pub unlabeled_train_accuracy: Option<f64>,
}

/// Builds the batch objective for `method` on `g`.
pub struct StepObjective {
    pub loss: Var,
    pub parts: LossParts,
}

fn value_of(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(f64::NAN, |v| g.value(v).item())
}

/// Model, replay memory and teacher carried across tasks.
#[derive(Clone, Debug)]
pub struct Learner {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub buffer: ReplayBuffer,
    pub unlabeled_store: Option<UnlabeledStore>,
    pub teacher: Option<TeacherSnapshot>,
    next_task: usize,
    steps_done: usize,
}

impl Learner {
    pub fn new(cfg: TrainConfig, input_dim: usize, class_count: usize) -> Result<Self> {
        cfg.validate()?;
        let model = ModelState::new(cfg.model_config(input_dim, class_count), cfg.seed)?;
        let capacity = if cfg.method.uses_replay() { cfg.buffer_capacity } else { 0 };
        let unlabeled_store = (cfg.unlabeled_buffer_capacity > 0 && cfg.method.uses_unlabeled())
            .then(|| UnlabeledStore::new(cfg.unlabeled_buffer_capacity, cfg.seed));
        Ok(Self {
            buffer: ReplayBuffer::new(capacity, cfg.seed),
            unlabeled_store,
            model,
            teacher: None,
            next_task: 0,
            steps_done: 0,
            cfg,
        })
    }

    pub fn next_task(&self) -> usize {
        self.next_task
    }

    /// Objective for one batch. Exposed so tests can check gradients of the
    /// exact training loss.
    pub fn objective(&self, g: &mut Graph, batch: &ViewBatch, t: usize, replay: &[Tensor; 2]) -> Result<(StepObjective, crate::model::BoundModel)> {
        let cfg = &self.cfg;
        let method = cfg.method;
        let model = &self.model;
        let bound = model.bind(g, true);
        let seen = &model.seen_classes;

        let lab_x = g.constant(batch.labeled.features.clone());
        let lab = model.forward(g, &bound, lab_x)?;
        let masked = mask_logits(g, lab.logits, seen)?;
        let smoothed = label_smooth(&batch.labeled.targets, seen, cfg.label_smoothing)?;
        let lin = loss_lin(g, masked, &smoothed)?;

        let has_unlabeled = batch.global[0].rows() > 0;
        if !method.uses_unlabeled() || !has_unlabeled {
            let lin_weight = if method.uses_unlabeled() { cfg.lambda_lin } else { 1.0 };
            let loss = g.scale(lin, lin_weight);
            let parts = LossParts {
                snn: f64::NAN,
                mem: f64::NAN,
                lin: g.value(lin).item(),
                distill: f64::NAN,
                total: g.value(loss).item(),
            };
            return Ok((StepObjective { loss, parts }, bound));
        }

        let support = SupportSet::new(
            g,
            lab.projections,
            batch.labeled.targets.clone(),
            batch.labeled.task_tags.clone(),
            batch.labeled.class_tags.clone(),
        )?
        .with_sample_ids(batch.labeled.ids.clone())?;
        let snn_support = if method == Method::Paws {
            support.clone()
        } else {
            filter_support(g, &support, t, FilterMode::CurrentOnly)?
        };

        let ga = g.constant(batch.global[0].clone());
        let gb = g.constant(batch.global[1].clone());
        let ha = model.forward(g, &bound, ga)?;
        let hb = model.forward(g, &bound, gb)?;
        let mut local_proj = Vec::with_capacity(batch.locals.len());
        for l in &batch.locals {
            let lv = g.constant(l.clone());
            local_proj.push(model.forward(g, &bound, lv)?.projections);
        }
        let snn = loss_snn_multi(g, [ha.projections, hb.projections], &local_proj, &snn_support, cfg.eps, cfg.tau)?;
        let mem = loss_mem(g, &snn.sharpened)?;
        let mut snn_loss = snn.loss;

        let previous = filter_support(g, &support, t, FilterMode::PreviousOnly);
        if replay[0].rows() > 0 {
            if let Ok(prev) = &previous {
                let ra = g.constant(replay[0].clone());
                let rb = g.constant(replay[1].clone());
                let pa = model.forward(g, &bound, ra)?.projections;
                let pb = model.forward(g, &bound, rb)?.projections;
                let old = loss_snn_multi(g, [pa, pb], &[], prev, cfg.eps, cfg.tau)?;
                snn_loss = g.weighted_sum(&[(1.0, snn_loss), (1.0, old.loss)])?;
            }
        }

        let csl = loss_csl(
            g,
            CslParts {
                snn: Some(snn_loss),
                mem: Some(mem),
                lin,
            },
            cfg.csl_weights(),
        )?;

        let mut distill = None;
        if let (true, Some(teacher)) = (method.needs_teacher() && t > 0, self.teacher.as_ref()) {
            distill = match method {
                Method::Nncsl => match previous {
                    Ok(student_support) => {
                        let teacher_feats = self.teacher_support_features(teacher, batch, &student_support)?;
                        let tf = g.constant(teacher_feats);
                        let teacher_support = SupportSet::new(
                            g,
                            tf,
                            student_support.targets.clone(),
                            student_support.task_tags.clone(),
                            student_support.class_tags.clone(),
                        )?
                        .with_sample_ids(student_support.sample_ids.clone())?;
                        let tq = g.constant(teacher.projections(&batch.global[0])?);
                        let db = DistillBatch::new(g, ha.projections, tq, student_support, teacher_support, cfg.tau)?;
                        Some(nnd_loss(g, &db)?)
                    }
                    Err(Error::EmptyFilter) => None,
                    Err(e) => return Err(e),
                },
                Method::CslKd => {
                    let prev_mask = self.previous_class_mask(t);
                    let (_, _, teacher_logits) = teacher.state().infer(&batch.global[0])?;
                    kd_loss(g, ha.logits, &teacher_logits, &prev_mask, cfg.kd_temperature)?
                }
                Method::CslFd => {
                    let tq = g.constant(teacher.projections(&batch.global[0])?);
                    Some(feature_distill_loss(g, ha.projections, tq)?)
                }
                _ => None,
            };
        }
        let loss = loss_nncsl(g, csl, distill, cfg.lambda_nnd)?;
        let parts = LossParts {
            snn: g.value(snn_loss).item(),
            mem: g.value(mem).item(),
            lin: g.value(lin).item(),
            distill: value_of(g, distill),
            total: g.value(loss).item(),
        };
        Ok((StepObjective { loss, parts }, bound))
    }

    fn teacher_support_features(
        &self,
        teacher: &TeacherSnapshot,
        batch: &ViewBatch,
        support: &SupportSet,
    ) -> Result<Tensor> {
        let rows: Vec<usize> = support
            .sample_ids
            .iter()
            .map(|id| {
                batch
                    .labeled
                    .ids
                    .iter()
                    .zip(&batch.labeled.replayed)
                    .position(|(i, &r)| i == id && r)
                    .expect("support rows come from the batch")
            })
            .collect();
        if teacher.has_feature_bank() {
            let banked: Option<Vec<&[f64]>> = support.sample_ids.iter().map(|&id| teacher.banked(id)).collect();
            if let Some(b) = banked {
                return Tensor::from_rows(&b);
            }
        }
        teacher.projections(&batch.labeled.features.select_rows(&rows))
    }

    fn previous_class_mask(&self, t: usize) -> Vec<bool> {
        let _ = t;
        let mut mask = self.model.seen_classes.clone();
        if let Some(teacher) = &self.teacher {
            for (m, &s) in mask.iter_mut().zip(&teacher.state().seen_classes) {
                *m = *m && s;
            }
        } else {
            mask.iter_mut().for_each(|m| *m = false);
        }
        mask
    }

    /// Trains task `t` (zero-based); tasks must arrive in order.
    pub fn train_task(&mut self, stream: &TaskStream, t: usize) -> Result<TaskLog> {
        if t != self.next_task || t >= stream.num_tasks() {
            return Err(Error::Protocol(format!(
                "expected task {}, got task {}",
                self.next_task + 1,
                t + 1
            )));
        }
        if self.cfg.method.needs_teacher() && t > 0 && self.teacher.is_none() {
            return Err(Error::Protocol("distillation needs a teacher snapshot".into()));
        }
        let cfg = self.cfg.clone();
        let task = stream.task(t).clone();
        self.model.mark_seen(&task.classes);
        if cfg.teacher_feature_bank {
            if let Some(teacher) = self.teacher.as_mut() {
                teacher.build_feature_bank(self.buffer.entries().iter().map(|s| (s.id, s.features.as_slice())))?;
            }
        }

        let mut rng = seeded_rng(cfg.seed, 100 + t as u64);
        let use_unlabeled = cfg.method.uses_unlabeled() && !task.unlabeled.is_empty();
        let steps_per_epoch = if use_unlabeled {
            task.unlabeled.len().div_ceil(cfg.unlabeled_batch)
        } else {
            task.labeled.len().div_ceil(cfg.labeled_batch).max(1)
        };
        let total_steps = steps_per_epoch * cfg.epochs_per_task;
        let warmup_steps = cfg.warmup_epochs() * steps_per_epoch;
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut epochs = Vec::with_capacity(cfg.epochs_per_task);
        let mut step = 0usize;
        let replay_on = cfg.method.uses_replay() && cfg.buffer_batch > 0;

        for epoch in 0..cfg.epochs_per_task {
            let mut order = task.unlabeled.clone();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for s in 0..steps_per_epoch {
                let chunk: &[usize] = if use_unlabeled {
                    let lo = s * cfg.unlabeled_batch;
                    &order[lo..(lo + cfg.unlabeled_batch).min(order.len())]
                } else {
                    &[]
                };
                let buf = replay_on.then_some(&self.buffer);
                let batch = compose_batch(stream, t, chunk, buf, &cfg, &mut rng)?;
                let replay = self.replay_views(&mut rng, chunk.len())?;
                let lr = lr_schedule(step, total_steps, warmup_steps, &cfg);

                let mut g = Graph::new();
                let (obj, bound) = self.objective(&mut g, &batch, t, &replay)?;
                if !obj.parts.total.is_finite() {
                    return Err(Error::Divergence {
                        task: t + 1,
                        step,
                        parts: obj.parts.to_string(),
                    });
                }
                log::debug!(
                    target: "nncsl::train",
                    "task={} epoch={} step={} lr={:.6} {}",
                    t + 1,
                    epoch,
                    step,
                    lr,
                    obj.parts
                );
                g.backward(obj.loss)?;
                let grads: Vec<Tensor> = bound
                    .vars()
                    .into_iter()
                    .map(|v| g.grad(v).cloned().expect("trainable params get gradients"))
                    .collect();
                if grads.iter().any(|gr| gr.data().iter().any(|x| !x.is_finite())) {
                    return Err(Error::Divergence {
                        task: t + 1,
                        step,
                        parts: format!("non-finite gradient; {}", obj.parts),
                    });
                }
                opt.step(self.model.params_mut(), &grads, lr);
                loss_sum += obj.parts.total;
                step += 1;
            }
            let unlabeled_accuracy = if task.unlabeled.is_empty() {
                None
            } else {
                Some(accuracy(&self.model, stream.dataset(), &task.unlabeled, &self.model.seen_classes)?)
            };
            epochs.push(EpochLog {
                task: t + 1,
                epoch: epoch + 1,
                mean_loss: loss_sum / steps_per_epoch as f64,
                unlabeled_accuracy,
            });
        }
        self.steps_done += step;

        let labeled_train_accuracy = accuracy(&self.model, stream.dataset(), &task.labeled, &self.model.seen_classes)?;
        let unlabeled_train_accuracy = epochs.last().and_then(|e| e.unlabeled_accuracy);

        if cfg.method.uses_replay() {
            update_buffer(&mut self.buffer, task.labeled.iter().map(|&i| labeled_sample(stream, t, i)));
        }
        if let Some(store) = self.unlabeled_store.as_mut() {
            store.insert(task.unlabeled.iter().map(|&i| labeled_sample(stream, t, i)));
        }
        self.teacher = Some(snapshot_teacher(&self.model, t));
        self.next_task += 1;
        Ok(TaskLog {
            task: t + 1,
            steps: step,
            epochs,
            labeled_train_accuracy,
            unlabeled_train_accuracy,
        })
    }

    fn replay_views(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<[Tensor; 2]> {
        let empty = || Tensor::zeros(vec![0, self.model.config.input_dim]);
        let Some(store) = self.unlabeled_store.as_ref().filter(|s| !s.is_empty()) else {
            return Ok([empty(), empty()]);
        };
        if n == 0 {
            return Ok([empty(), empty()]);
        }
        let samples = store.sample(n, rng);
        let rows: Vec<(usize, &[f64])> = samples.iter().map(|s| (s.id, s.features.as_slice())).collect();
        let aug = AugmentConfig {
            local_views: 0,
            ..self.cfg.augment.clone()
        };
        let vb = augment_views(
            &rows,
            &[],
            0,
            self.model.config.class_count,
            self.model.config.input_dim,
            &aug,
            rng,
        )?;
        Ok(vb.global)
    }
}

/// Accuracy of the masked linear head on `indices` of `d`.
pub fn accuracy(model: &ModelState, d: &Dataset, indices: &[usize], mask: &[bool]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::State("accuracy over an empty set".into()));
    }
    let x = d.features().select_rows(indices);
    let pred = masked_argmax(&model.infer(&x)?.2, mask)?;
    let correct = pred
        .iter()
        .zip(indices)
        .filter(|(p, &i)| **p == d.labels()[i])
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

fn class_mask(classes: &[usize], class_count: usize) -> Vec<bool> {
    let mut m = vec![false; class_count];
    for &c in classes {
        m[c] = true;
    }
    m
}

/// Accuracy of `model` on task `j` of `eval` after training through task
/// `after` (`None` for the untrained model). Seen tasks use the seen-class
/// mask; tasks not yet trained are scored within their own classes.
pub fn evaluate_task(
    model: &ModelState,
    stream: &TaskStream,
    eval: &Dataset,
    j: usize,
    after: Option<usize>,
) -> Result<f64> {
    let idx = stream.eval_indices(j, eval);
    let mask = match after {
        Some(i) if j <= i => model.seen_classes.clone(),
        _ => class_mask(&stream.task(j).classes, stream.class_count()),
    };
    accuracy(model, eval, &idx, &mask)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub matrix: ResultMatrix,
    pub task_logs: Vec<TaskLog>,
    pub model: ModelState,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for per-task checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains every task in order and fills the accuracy matrix row by row.
pub fn run_stream(cfg: &TrainConfig, stream: &TaskStream, eval: &Dataset) -> Result<RunOutcome> {
    run_stream_with(cfg, stream, eval, &RunOptions::default())
}

pub fn run_stream_with(
    cfg: &TrainConfig,
    stream: &TaskStream,
    eval: &Dataset,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let d = stream.dataset();
    if eval.dim() != d.dim() || eval.class_count() != d.class_count() {
        return Err(Error::Shape("evaluation set does not match the training stream".into()));
    }
    let mut learner = Learner::new(cfg.clone(), d.dim(), d.class_count())?;
    let t_count = stream.num_tasks();
    let mut matrix = ResultMatrix::new(t_count);
    for j in 0..t_count {
        matrix.set_random(j, evaluate_task(&learner.model, stream, eval, j, None)?)?;
    }
    let mut task_logs = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let log = learner.train_task(stream, t).map_err(|e| match e {
            Error::Divergence { .. } => e,
            other => Error::Protocol(format!("task {}: {other}", t + 1)),
        })?;
        task_logs.push(log);
        for j in 0..t_count {
            matrix.set(t, j, evaluate_task(&learner.model, stream, eval, j, Some(t))?)?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            learner.model.save(&dir.join(format!("task_{}.json", t + 1)))?;
        }
    }
    Ok(RunOutcome {
        matrix,
        task_logs,
        model: learner.model,
    })
}

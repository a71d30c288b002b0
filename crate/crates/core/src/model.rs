//! Backbone, projector and unified linear classifier, plus teacher snapshots
//! and the checkpoint format.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub class_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            backbone_widths: vec![64, 64],
            projector_hidden: 64,
            projection_dim: 16,
            class_count: 2,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// in × out
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundLinear {
            weight: leaf(g, &self.weight),
            bias: leaf(g, &self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Parameters of g (backbone), h (projector) and p (classifier), and the set
/// of classes seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Vec<Linear>,
    pub projector: Vec<Linear>,
    pub classifier: Linear,
    pub seen_classes: Vec<bool>,
}

/// A model's parameters registered on one graph, in [`ModelState::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: Vec<BoundLinear>,
    pub projector: Vec<BoundLinear>,
    pub classifier: BoundLinear,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(&self.projector)
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub features: Var,
    pub projections: Var,
    pub logits: Var,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0
            || config.projection_dim == 0
            || config.projector_hidden == 0
            || config.class_count == 0
            || config.backbone_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::Parameter(format!("model sizes must be positive: {config:?}")));
        }
        let mut rng = seeded_rng(seed, 21);
        let mut backbone = Vec::new();
        let mut fan_in = config.input_dim;
        for &w in &config.backbone_widths {
            backbone.push(Linear::init(fan_in, w, &mut rng));
            fan_in = w;
        }
        let feat = config.feature_dim();
        let projector = vec![
            Linear::init(feat, config.projector_hidden, &mut rng),
            Linear::init(config.projector_hidden, config.projection_dim, &mut rng),
        ];
        let classifier = Linear::init(feat, config.class_count, &mut rng);
        Ok(Self {
            seen_classes: vec![false; config.class_count],
            config,
            backbone,
            projector,
            classifier,
        })
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Linear)> {
        let b = self.backbone.iter().enumerate().map(|(i, l)| (format!("backbone.{i}"), l));
        let p = self.projector.iter().enumerate().map(|(i, l)| (format!("projector.{i}"), l));
        b.chain(p).chain(std::iter::once(("classifier".to_string(), &self.classifier)))
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(self.projector.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.iter().map(|l| l.bind(g, trainable)).collect(),
            projector: self.projector.iter().map(|l| l.bind(g, trainable)).collect(),
            classifier: self.classifier.bind(g, trainable),
        }
    }

    /// Features z = g(x), projections h(z) and logits p(z).
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, x: Var) -> Result<Outputs> {
        let width = g.value(x).cols();
        if width != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input width {width} does not match backbone input {}",
                self.config.input_dim
            )));
        }
        let mut z = x;
        for l in &bound.backbone {
            let y = l.apply(g, z)?;
            z = g.relu(y);
        }
        let mut h = z;
        for (i, l) in bound.projector.iter().enumerate() {
            h = l.apply(g, h)?;
            if i + 1 < bound.projector.len() {
                h = g.relu(h);
            }
        }
        let logits = bound.classifier.apply(g, z)?;
        Ok(Outputs {
            features: z,
            projections: h,
            logits,
        })
    }

    /// Forward pass without recording gradients; returns (z, h, logits).
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        Ok((
            g.value(out.features).clone(),
            g.value(out.projections).clone(),
            g.value(out.logits).clone(),
        ))
    }

    /// Arg-max class of the linear head restricted to `mask`.
    pub fn predict(&self, x: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
        let (_, _, logits) = self.infer(x)?;
        masked_argmax(&logits, mask)
    }

    pub fn mark_seen(&mut self, classes: &[usize]) {
        for &c in classes {
            self.seen_classes[c] = true;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::from_state(self);
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        ckpt.into_state()
    }
}

pub fn masked_argmax(logits: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Protocol("no classes are selectable".into()));
    }
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = None::<(usize, f64)>;
            for (j, &v) in row.iter().enumerate() {
                if mask[j] && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.expect("mask has a true entry").0
        })
        .collect())
}

/// Sets logits of unseen classes to negative infinity.
pub fn mask_logits(g: &mut Graph, logits: Var, seen: &[bool]) -> Result<Var> {
    if !seen.iter().any(|&s| s) {
        return Err(Error::Protocol("cannot mask logits with no seen classes".into()));
    }
    let offsets = seen
        .iter()
        .map(|&s| if s { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let row = g.constant(Tensor::new(vec![seen.len()], offsets)?);
    g.add_row(logits, row)
}

/// Frozen copy of the model at the end of a task.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    state: ModelState,
    task_index: usize,
    /// Optional precomputed projections keyed by sample id.
    feature_bank: Option<std::collections::HashMap<usize, Vec<f64>>>,
}

pub fn snapshot_teacher(m: &ModelState, task_index: usize) -> TeacherSnapshot {
    TeacherSnapshot {
        state: m.clone(),
        task_index,
        feature_bank: None,
    }
}

impl TeacherSnapshot {
    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    /// Adds the snapshot's parameters to `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        self.state.bind(g, false)
    }

    pub fn projections(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.state.infer(x)?.1)
    }

    /// Embeds `samples` once so later lookups skip the forward pass.
    pub fn build_feature_bank<'a>(
        &mut self,
        samples: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) -> Result<()> {
        let samples: Vec<(usize, &[f64])> = samples.into_iter().collect();
        let mut bank = std::collections::HashMap::new();
        if !samples.is_empty() {
            let rows: Vec<&[f64]> = samples.iter().map(|(_, r)| *r).collect();
            let h = self.projections(&Tensor::from_rows(&rows)?)?;
            for (i, (id, _)) in samples.iter().enumerate() {
                bank.insert(*id, h.row(i).to_vec());
            }
        }
        self.feature_bank = Some(bank);
        Ok(())
    }

    pub fn banked(&self, id: usize) -> Option<&[f64]> {
        self.feature_bank.as_ref()?.get(&id).map(Vec::as_slice)
    }

    pub fn has_feature_bank(&self) -> bool {
        self.feature_bank.is_some()
    }
}

pub const CHECKPOINT_FORMAT: &str = "nncsl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON checkpoint: named parameter tensors with shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seen_classes: Vec<bool>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_state(m: &ModelState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: m.config.clone(),
            seen_classes: m.seen_classes.clone(),
            params: m
                .params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_state(self) -> Result<ModelState> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut m = ModelState::new(self.config, 0)?;
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.params.len()
            )));
        }
        for ((slot, name), stored) in m.params_mut().into_iter().zip(&names).zip(self.params) {
            if &stored.name != name || stored.shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    stored.name,
                    stored.shape,
                    name,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(stored.shape, stored.data)?;
        }
        if self.seen_classes.len() != m.seen_classes.len() {
            return Err(Error::Checkpoint("seen-class mask has wrong width".into()));
        }
        m.seen_classes = self.seen_classes;
        Ok(m)
    }
}

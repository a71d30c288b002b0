//! Soft nearest-neighbor pseudo-labeling and the base learner's losses.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Labeled embeddings the soft nearest-neighbor classifier compares against.
#[derive(Clone, Debug)]
pub struct SupportSet {
    /// K×q projected embeddings.
    pub features: Var,
    /// K×C target rows; each sums to one.
    pub targets: Tensor,
    pub task_tags: Vec<usize>,
    pub class_tags: Vec<usize>,
    /// Identity of the underlying labeled samples, used to check alignment
    /// between two embeddings of the same support.
    pub sample_ids: Vec<usize>,
}

impl SupportSet {
    pub fn new(
        g: &Graph,
        features: Var,
        targets: Tensor,
        task_tags: Vec<usize>,
        class_tags: Vec<usize>,
    ) -> Result<Self> {
        let k = g.value(features).rows();
        if k == 0 {
            return Err(Error::DegenerateSupport);
        }
        if targets.rows() != k || task_tags.len() != k || class_tags.len() != k {
            return Err(Error::Shape(format!(
                "support of {k} rows has {} targets, {} task tags, {} class tags",
                targets.rows(),
                task_tags.len(),
                class_tags.len()
            )));
        }
        for i in 0..k {
            let s: f64 = targets.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("support target row {i} sums to {s}")));
            }
        }
        Ok(Self {
            features,
            targets,
            task_tags,
            class_tags,
            sample_ids: (0..k).collect(),
        })
    }

    pub fn with_sample_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} sample ids for a support of {} rows",
                ids.len(),
                self.len()
            )));
        }
        self.sample_ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.task_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_tags.is_empty()
    }
}

/// Soft class assignment of a batch of queries.
#[derive(Clone, Copy, Debug)]
pub struct PseudoLabel {
    pub distribution: Var,
    pub temperature: f64,
}

/// `row i = sum_k softmax_k(cos(h_i, s_k) / temp) * y_k`.
pub fn snn_classify(g: &mut Graph, queries: Var, support: &SupportSet, temp: f64) -> Result<PseudoLabel> {
    if support.is_empty() {
        return Err(Error::DegenerateSupport);
    }
    let sim = g.cosine_sim(queries, support.features)?;
    let weights = g.softmax_t(sim, temp, None)?;
    let targets = g.constant(support.targets.clone());
    let distribution = g.matmul(weights, targets)?;
    Ok(PseudoLabel {
        distribution,
        temperature: temp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    CurrentOnly,
    PreviousOnly,
}

/// Keeps support rows of the current task, or of earlier tasks.
pub fn filter_support(
    g: &mut Graph,
    support: &SupportSet,
    current_task: usize,
    mode: FilterMode,
) -> Result<SupportSet> {
    if support.is_empty() {
        return Err(Error::DegenerateSupport);
    }
    let keep: Vec<usize> = support
        .task_tags
        .iter()
        .enumerate()
        .filter(|(_, &t)| match mode {
            FilterMode::CurrentOnly => t == current_task,
            FilterMode::PreviousOnly => t < current_task,
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyFilter);
    }
    if keep.len() == support.len() {
        return Ok(support.clone());
    }
    let features = g.select_rows(support.features, &keep)?;
    Ok(SupportSet {
        features,
        targets: support.targets.select_rows(&keep),
        task_tags: keep.iter().map(|&i| support.task_tags[i]).collect(),
        class_tags: keep.iter().map(|&i| support.class_tags[i]).collect(),
        sample_ids: keep.iter().map(|&i| support.sample_ids[i]).collect(),
    })
}

/// Result of the consistency loss, with the sharpened (ε) predictions kept
/// for the mean-entropy term.
#[derive(Clone, Debug)]
pub struct SnnLoss {
    pub loss: Var,
    pub sharpened: Vec<PseudoLabel>,
}

fn check_temperatures(eps: f64, tau: f64) -> Result<()> {
    if !(eps > 0.0) || !(tau > eps) {
        return Err(Error::Parameter(format!(
            "need tau > eps > 0, got tau = {tau}, eps = {eps}"
        )));
    }
    Ok(())
}

/// Symmetrized consistency loss between two global views: each view's
/// τ-prediction is trained towards the other view's detached ε-prediction.
pub fn loss_snn(
    g: &mut Graph,
    view_a: Var,
    view_b: Var,
    support: &SupportSet,
    eps: f64,
    tau: f64,
) -> Result<SnnLoss> {
    loss_snn_multi(g, [view_a, view_b], &[], support, eps, tau)
}

/// Consistency loss over two global views and any number of local views.
/// Global views target each other; every local view targets both globals.
/// The result is the mean over all directed pairs.
pub fn loss_snn_multi(
    g: &mut Graph,
    globals: [Var; 2],
    locals: &[Var],
    support: &SupportSet,
    eps: f64,
    tau: f64,
) -> Result<SnnLoss> {
    check_temperatures(eps, tau)?;
    let sharp_a = snn_classify(g, globals[0], support, eps)?;
    let sharp_b = snn_classify(g, globals[1], support, eps)?;
    let target_a = g.detach(sharp_a.distribution);
    let target_b = g.detach(sharp_b.distribution);
    let pred_a = snn_classify(g, globals[0], support, tau)?;
    let pred_b = snn_classify(g, globals[1], support, tau)?;
    let mut terms = vec![
        g.cross_entropy(pred_a.distribution, target_b)?,
        g.cross_entropy(pred_b.distribution, target_a)?,
    ];
    for &local in locals {
        let pred = snn_classify(g, local, support, tau)?;
        terms.push(g.cross_entropy(pred.distribution, target_a)?);
        terms.push(g.cross_entropy(pred.distribution, target_b)?);
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (w, t)).collect();
    Ok(SnnLoss {
        loss: g.weighted_sum(&weighted)?,
        sharpened: vec![sharp_a, sharp_b],
    })
}

/// Negative entropy of the batch-mean prediction. Minimizing it spreads the
/// mean prediction over the classes present in the support.
pub fn loss_mem(g: &mut Graph, pseudo: &[PseudoLabel]) -> Result<Var> {
    let Some(first) = pseudo.first() else {
        return Err(Error::Shape("mean-entropy loss needs at least one batch".into()));
    };
    let mut mean = g.mean_rows(first.distribution);
    for p in &pseudo[1..] {
        let m = g.mean_rows(p.distribution);
        mean = g.add(mean, m)?;
    }
    let mean = g.scale(mean, 1.0 / pseudo.len() as f64);
    let h = g.entropy(mean)?;
    Ok(g.scale(h, -1.0))
}

/// Label smoothing restricted to the seen classes:
/// `(1 - alpha) * y + alpha / |seen|` on seen columns, zero elsewhere.
pub fn label_smooth(one_hot: &Tensor, seen: &[bool], alpha: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("smoothing must be in [0, 1), got {alpha}")));
    }
    let c = one_hot.cols();
    if seen.len() != c {
        return Err(Error::Dimension {
            op: "label_smooth",
            lhs: one_hot.shape().to_vec(),
            rhs: vec![seen.len()],
        });
    }
    let n_seen = seen.iter().filter(|&&s| s).count();
    if n_seen == 0 {
        return Err(Error::Protocol("label smoothing with no seen classes".into()));
    }
    let mut out = one_hot.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (j, y) in row.iter_mut().enumerate() {
            *y = if seen[j] {
                (1.0 - alpha) * *y + alpha / n_seen as f64
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the (already masked) linear-head logits against
/// smoothed one-hot targets, over every labeled row in the batch.
pub fn loss_lin(g: &mut Graph, masked_logits: Var, targets: &Tensor) -> Result<Var> {
    if g.value(masked_logits).rows() == 0 {
        return Err(Error::Shape("linear loss needs at least one labeled row".into()));
    }
    let probs = g.softmax_t(masked_logits, 1.0, None)?;
    let t = g.constant(targets.clone());
    g.cross_entropy(probs, t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CslWeights {
    pub mem: f64,
    pub lin: f64,
}

impl Default for CslWeights {
    fn default() -> Self {
        Self { mem: 1.0, lin: 0.005 }
    }
}

/// Components of the base learner's objective on one batch. The
/// unlabeled terms are absent when the batch has no unlabeled rows.
#[derive(Clone, Copy, Debug)]
pub struct CslParts {
    pub snn: Option<Var>,
    pub mem: Option<Var>,
    pub lin: Var,
}

/// `L_SNN + w_mem * L_MEM + w_lin * L_LIN`.
pub fn loss_csl(g: &mut Graph, parts: CslParts, weights: CslWeights) -> Result<Var> {
    if weights.mem < 0.0 || weights.lin < 0.0 {
        return Err(Error::Parameter(format!("loss weights must be >= 0: {weights:?}")));
    }
    let mut terms = vec![(weights.lin, parts.lin)];
    if let Some(s) = parts.snn {
        terms.push((1.0, s));
    }
    if let Some(m) = parts.mem {
        terms.push((weights.mem, m));
    }
    g.weighted_sum(&terms)
}

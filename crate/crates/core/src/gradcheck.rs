//! Central finite-difference checks of reverse-mode gradients.
//!
//! Detached values are recorded on the analytic pass and replayed on every
//! perturbed pass, so stop-gradient targets stay fixed as they do for
//! backpropagation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{one_hot, seeded_rng};
use crate::distill::{feature_distill_loss, kd_loss, nnd_loss, DistillBatch};
use crate::error::Result;
use crate::model::{mask_logits, BoundModel, ModelConfig, ModelState};
use crate::snn::{
    filter_support, label_smooth, loss_csl, loss_lin, loss_mem, loss_snn_multi, CslParts, CslWeights, FilterMode,
    SupportSet,
};
use crate::tensor::{Graph, Tensor, Var};

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` (Euclidean
/// norms); tensors whose gradients are both below `1e-10` count as exact.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let (na, nn) = (norm(a.iter().copied()), norm(n.iter().copied()));
    let scale = na.max(nn);
    if scale < 1e-10 {
        return 0.0;
    }
    norm(a.iter().zip(n).map(|(x, y)| x - y)) / scale
}

fn compare(
    names: &[String],
    analytic: &[Tensor],
    h: f64,
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradReport> {
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            *slot = (eval(i, e, h)? - eval(i, e, -h)?) / (2.0 * h);
        }
        let err = rel_error(a.data(), &numeric);
        report.checked += a.len();
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = names[i].clone();
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to each of `inputs`, which are
/// bound as trainable leaves in order.
pub fn check_leaves<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).cloned().expect("leaf gradient")).collect();
    let frozen = g.detached_values().to_vec();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input {i}")).collect();
    compare(&names, &analytic, h, |i, e, step| {
        let mut perturbed = inputs.to_vec();
        perturbed[i].data_mut()[e] += step;
        let mut g = Graph::with_frozen_detaches(frozen.clone());
        let vars: Vec<Var> = perturbed.into_iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    })
}

/// Checks the gradient of `f` with respect to every parameter of `model`.
pub fn check_model<F>(model: &ModelState, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ModelState, &BoundModel) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = f(&mut g, model, &bound)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = bound
        .vars()
        .into_iter()
        .map(|v| g.grad(v).cloned().expect("parameter gradient"))
        .collect();
    let frozen = g.detached_values().to_vec();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    compare(&names, &analytic, h, |i, e, step| {
        let mut m = model.clone();
        m.params_mut()[i].data_mut()[e] += step;
        let mut g = Graph::with_frozen_detaches(frozen.clone());
        let bound = m.bind(&mut g, true);
        let loss = f(&mut g, &m, &bound)?;
        Ok(g.value(loss).item())
    })
}

/// Names of the losses covered by [`loss_suite`].
pub const SUITE_LOSSES: [&str; 7] = ["snn", "mem", "lin", "csl", "nnd", "kd", "feature"];

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized data")
}

/// Checks every training loss on a small two-layer model with a random
/// batch drawn from `seed`. The current task is task 1 of two, so both the
/// current-only and previous-only supports are non-empty.
pub fn loss_suite(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    const H: f64 = 1e-6;
    let cfg = ModelConfig {
        input_dim: 4,
        backbone_widths: vec![6, 6],
        projector_hidden: 6,
        projection_dim: 4,
        class_count: 4,
    };
    let mut rng = seeded_rng(seed, 7);
    // Non-zero biases keep every projection row away from the zero vector,
    // where normalization has no derivative.
    let mut model = ModelState::new(cfg.clone(), seed)?;
    let mut teacher = ModelState::new(cfg, seed.wrapping_add(1_000))?;
    for m in [&mut model, &mut teacher] {
        for p in m.params_mut().into_iter().filter(|p| p.shape().len() == 1) {
            p.data_mut().iter_mut().for_each(|b| *b = 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    model.mark_seen(&[0, 1, 2, 3]);
    let classes = vec![0, 1, 2, 3, 2, 3];
    let tasks: Vec<usize> = classes.iter().map(|c| c / 2).collect();
    let xl = random_matrix(&mut rng, classes.len(), 4, 1.5);
    let xa = random_matrix(&mut rng, 5, 4, 1.5);
    let xb = random_matrix(&mut rng, 5, 4, 1.5);
    let xloc = random_matrix(&mut rng, 5, 4, 1.5);
    let targets = one_hot(&classes, 4);
    let seen = [true, true, true, false];
    let prev = [true, true, false, false];
    let lin_classes: Vec<usize> = classes.iter().map(|&c| c.min(2)).collect();
    let lin_targets = label_smooth(&one_hot(&lin_classes, 4), &seen, 0.1)?;

    let snn_parts = |g: &mut Graph, m: &ModelState, b: &BoundModel| -> Result<(Var, Var)> {
        let l = g.constant(xl.clone());
        let h = m.forward(g, b, l)?.projections;
        let support = SupportSet::new(g, h, targets.clone(), tasks.clone(), classes.clone())?;
        let support = filter_support(g, &support, 1, FilterMode::CurrentOnly)?;
        let mut views = Vec::new();
        for x in [&xa, &xb, &xloc] {
            let v = g.constant(x.clone());
            views.push(m.forward(g, b, v)?.projections);
        }
        let out = loss_snn_multi(g, [views[0], views[1]], &views[2..], &support, 0.025, 0.1)?;
        let mem = loss_mem(g, &out.sharpened)?;
        Ok((out.loss, mem))
    };
    let lin = |g: &mut Graph, m: &ModelState, b: &BoundModel| -> Result<Var> {
        let l = g.constant(xl.clone());
        let logits = m.forward(g, b, l)?.logits;
        let masked = mask_logits(g, logits, &seen)?;
        loss_lin(g, masked, &lin_targets)
    };

    let mut out = Vec::with_capacity(SUITE_LOSSES.len());
    out.push(("snn", check_model(&model, H, |g, m, b| Ok(snn_parts(g, m, b)?.0))?));
    out.push(("mem", check_model(&model, H, |g, m, b| Ok(snn_parts(g, m, b)?.1))?));
    out.push(("lin", check_model(&model, H, lin)?));
    out.push((
        "csl",
        check_model(&model, H, |g, m, b| {
            let (snn, mem) = snn_parts(g, m, b)?;
            let lin = lin(g, m, b)?;
            loss_csl(
                g,
                CslParts {
                    snn: Some(snn),
                    mem: Some(mem),
                    lin,
                },
                CslWeights { mem: 1.0, lin: 0.5 },
            )
        })?,
    ));
    out.push((
        "nnd",
        check_model(&model, H, |g, m, b| {
            let l = g.constant(xl.clone());
            let h = m.forward(g, b, l)?.projections;
            let support = SupportSet::new(g, h, targets.clone(), tasks.clone(), classes.clone())?;
            let student_support = filter_support(g, &support, 1, FilterMode::PreviousOnly)?;
            let (_, th, _) = teacher.infer(&xl)?;
            let th = g.constant(th);
            let teacher_all = SupportSet::new(g, th, targets.clone(), tasks.clone(), classes.clone())?;
            let teacher_support = filter_support(g, &teacher_all, 1, FilterMode::PreviousOnly)?;
            let a = g.constant(xa.clone());
            let q = m.forward(g, b, a)?.projections;
            let tq = g.constant(teacher.infer(&xa)?.1);
            let batch = DistillBatch::new(g, q, tq, student_support, teacher_support, 0.1)?;
            nnd_loss(g, &batch)
        })?,
    ));
    out.push((
        "kd",
        check_model(&model, H, |g, m, b| {
            let a = g.constant(xa.clone());
            let logits = m.forward(g, b, a)?.logits;
            let teacher_logits = teacher.infer(&xa)?.2;
            Ok(kd_loss(g, logits, &teacher_logits, &prev, 2.0)?.expect("previous classes exist"))
        })?,
    ));
    out.push((
        "feature",
        check_model(&model, H, |g, m, b| {
            let a = g.constant(xa.clone());
            let z = m.forward(g, b, a)?.projections;
            let tz = g.constant(teacher.infer(&xa)?.1);
            feature_distill_loss(g, z, tz)
        })?,
    ));
    Ok(out)
}

//! Nearest-neighbor distillation and the two baseline distillation losses.

use crate::error::{Error, Result};
use crate::snn::{snn_classify, SupportSet};
use crate::tensor::{Graph, Tensor, Var};

/// Student and teacher embeddings of the same unlabeled queries and the same
/// previous-class support samples.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub student_proj: Var,
    pub teacher_proj: Var,
    pub student_support: SupportSet,
    pub teacher_support: SupportSet,
    pub temperature: f64,
}

impl DistillBatch {
    pub fn new(
        g: &Graph,
        student_proj: Var,
        teacher_proj: Var,
        student_support: SupportSet,
        teacher_support: SupportSet,
        temperature: f64,
    ) -> Result<Self> {
        if student_support.is_empty() || teacher_support.is_empty() {
            return Err(Error::EmptyFilter);
        }
        if student_support.sample_ids != teacher_support.sample_ids
            || student_support.class_tags != teacher_support.class_tags
        {
            return Err(Error::Protocol(
                "student and teacher supports do not list the same samples in the same order".into(),
            ));
        }
        let (s, t) = (g.value(student_proj), g.value(teacher_proj));
        if s.rows() != t.rows() {
            return Err(Error::Dimension {
                op: "distill queries",
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        Ok(Self {
            student_proj,
            teacher_proj,
            student_support,
            teacher_support,
            temperature,
        })
    }
}

/// Cross-entropy between the student's soft nearest-neighbor prediction and
/// the teacher's, both at the same (unsharpened) temperature. The teacher
/// side is detached.
pub fn nnd_loss(g: &mut Graph, b: &DistillBatch) -> Result<Var> {
    let student = snn_classify(g, b.student_proj, &b.student_support, b.temperature)?;
    let teacher = snn_classify(g, b.teacher_proj, &b.teacher_support, b.temperature)?;
    let target = g.detach(teacher.distribution);
    g.cross_entropy(student.distribution, target)
}

/// `csl + lambda * nnd`; a missing distillation term contributes zero.
pub fn loss_nncsl(g: &mut Graph, csl: Var, nnd: Option<Var>, lambda_nnd: f64) -> Result<Var> {
    if !(lambda_nnd >= 0.0) {
        return Err(Error::Parameter(format!("lambda_nnd must be >= 0, got {lambda_nnd}")));
    }
    match nnd {
        Some(n) => g.weighted_sum(&[(1.0, csl), (lambda_nnd, n)]),
        None => Ok(csl),
    }
}

/// Logit distillation over previously seen classes: cross-entropy between
/// the temperature-softened student distribution and the detached teacher
/// distribution. Returns `None` when there are no previous classes.
pub fn kd_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    seen_prev: &[bool],
    temp: f64,
) -> Result<Option<Var>> {
    if !seen_prev.iter().any(|&s| s) {
        return Ok(None);
    }
    let student = g.softmax_t(student_logits, temp, Some(seen_prev))?;
    let t = g.constant(teacher_logits.clone());
    let teacher = g.softmax_t(t, temp, Some(seen_prev))?;
    g.cross_entropy(student, teacher).map(Some)
}

/// Mean of `1 - cos(student_i, teacher_i)` over matching rows.
pub fn feature_distill_loss(g: &mut Graph, student_proj: Var, teacher_proj: Var) -> Result<Var> {
    let (s, t) = (g.value(student_proj), g.value(teacher_proj));
    if s.shape() != t.shape() {
        return Err(Error::Dimension {
            op: "feature_distill_loss",
            lhs: s.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let n = s.rows() as f64;
    let teacher = g.detach(teacher_proj);
    let a = g.normalize_rows(student_proj);
    let b = g.normalize_rows(teacher);
    let prod = g.mul(a, b)?;
    let total = g.sum(prod);
    let one = g.constant(Tensor::scalar(1.0));
    g.weighted_sum(&[(1.0, one), (-1.0 / n, total)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;

    fn support(g: &mut Graph, rows: &[&[f64]], classes: &[usize], trainable: bool) -> SupportSet {
        let t = Tensor::from_rows(rows).unwrap();
        let f = if trainable { g.param(t) } else { g.constant(t) };
        let tasks = vec![0; rows.len()];
        SupportSet::new(g, f, one_hot(classes, 4), tasks, classes.to_vec()).unwrap()
    }

    #[test]
    fn equal_models_give_teacher_entropy() {
        let mut g = Graph::new();
        let rows: &[&[f64]] = &[&[1.0, 0.2], &[-0.3, 1.0], &[0.5, -0.5]];
        let s = support(&mut g, rows, &[0, 1, 2], true);
        let t = support(&mut g, rows, &[0, 1, 2], false);
        let q = Tensor::from_rows(&[[0.4, 0.9], [1.0, -0.1]]).unwrap();
        let sq = g.param(q.clone());
        let tq = g.constant(q);
        let b = DistillBatch::new(&g, sq, tq, s, t.clone(), 0.1).unwrap();
        let loss = nnd_loss(&mut g, &b).unwrap();
        let tp = snn_classify(&mut g, tq, &t, 0.1).unwrap();
        let h = g.entropy(tp.distribution).unwrap();
        assert!((g.value(loss).item() - g.value(h).item()).abs() < 1e-9);
    }

    #[test]
    fn single_support_gives_zero() {
        let mut g = Graph::new();
        let s = support(&mut g, &[&[1.0, 0.0]], &[3], true);
        let t = support(&mut g, &[&[0.0, 1.0]], &[3], false);
        let sq = g.param(Tensor::from_rows(&[[0.3, 0.3]]).unwrap());
        let tq = g.constant(Tensor::from_rows(&[[-1.0, 0.2]]).unwrap());
        let b = DistillBatch::new(&g, sq, tq, s, t, 0.1).unwrap();
        let loss = nnd_loss(&mut g, &b).unwrap();
        assert!(g.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn misaligned_supports_are_rejected() {
        let mut g = Graph::new();
        let rows: &[&[f64]] = &[&[1.0, 0.2], &[-0.3, 1.0]];
        let s = support(&mut g, rows, &[0, 1], true).with_sample_ids(vec![4, 9]).unwrap();
        let t = support(&mut g, rows, &[1, 0], false).with_sample_ids(vec![9, 4]).unwrap();
        let q = g.constant(Tensor::from_rows(&[[0.4, 0.9]]).unwrap());
        assert!(matches!(
            DistillBatch::new(&g, q, q, s, t, 0.1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn nncsl_weighting() {
        let mut g = Graph::new();
        let csl = g.constant(Tensor::scalar(1.25));
        let nnd = g.constant(Tensor::scalar(0.5));
        let l0 = loss_nncsl(&mut g, csl, Some(nnd), 0.0).unwrap();
        assert_eq!(g.value(l0).item(), 1.25);
        let l = loss_nncsl(&mut g, csl, Some(nnd), 0.2).unwrap();
        assert!((g.value(l).item() - 1.35).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        let l1 = loss_nncsl(&mut g, csl, Some(zero), 1.0).unwrap();
        assert_eq!(g.value(l1).item(), 1.25);
        let none = loss_nncsl(&mut g, csl, None, 0.2).unwrap();
        assert_eq!(none, csl);
    }

    #[test]
    fn kd_cases() {
        let mut g = Graph::new();
        let logits = Tensor::from_rows(&[[1.0, -0.5, 2.0, 0.3]]).unwrap();
        let prev = [true, true, false, false];
        let s = g.param(logits.clone());
        let l = kd_loss(&mut g, s, &logits, &prev, 2.0).unwrap().unwrap();
        let tv = g.constant(logits.clone());
        let tp = g.softmax_t(tv, 2.0, Some(&prev)).unwrap();
        let h = g.entropy(tp).unwrap();
        assert!((g.value(l).item() - g.value(h).item()).abs() < 1e-12);

        let single = [false, true, false, false];
        let l = kd_loss(&mut g, s, &Tensor::from_rows(&[[9.0, 0.0, 0.0, 0.0]]).unwrap(), &single, 2.0)
            .unwrap()
            .unwrap();
        assert!(g.value(l).item().abs() < 1e-9);
        assert!(kd_loss(&mut g, s, &logits, &[false; 4], 2.0).unwrap().is_none());
    }

    #[test]
    fn feature_distill_cases() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[[1.0, 2.0], [0.0, -3.0]]).unwrap());
        let l = feature_distill_loss(&mut g, a, a).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let b = g.constant(Tensor::from_rows(&[[-1.0, -2.0], [0.0, 3.0]]).unwrap());
        let l = feature_distill_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
    }
}

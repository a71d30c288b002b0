//! Accuracy matrix bookkeeping and the continual-learning summary metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[i][j]` is the accuracy on task `j` after training task `i`
/// (zero-based); `random[j]` is the accuracy of the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    acc: Vec<Vec<Option<f64>>>,
    random: Vec<Option<f64>>,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            acc: vec![vec![None; tasks]; tasks],
            random: vec![None; tasks],
        }
    }

    /// Builds a complete matrix from rows and a random-baseline vector.
    pub fn from_rows(rows: Vec<Vec<f64>>, random: Vec<f64>) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) || random.len() != t {
            return Err(Error::Shape(format!("result matrix must be {t}×{t}")));
        }
        let mut m = Self::new(t);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        for (j, v) in random.into_iter().enumerate() {
            m.set_random(j, v)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.acc.len()
    }

    fn check(v: f64) -> Result<f64> {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::Domain(format!("accuracy {v} outside [0, 1]")))
        }
    }

    pub fn set(&mut self, after: usize, eval: usize, accuracy: f64) -> Result<()> {
        self.acc[after][eval] = Some(Self::check(accuracy)?);
        Ok(())
    }

    pub fn set_random(&mut self, eval: usize, accuracy: f64) -> Result<()> {
        self.random[eval] = Some(Self::check(accuracy)?);
        Ok(())
    }

    pub fn get(&self, after: usize, eval: usize) -> Option<f64> {
        self.acc[after][eval]
    }

    pub fn random(&self, eval: usize) -> Option<f64> {
        self.random[eval]
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.acc[i][j].ok_or_else(|| {
            Error::State(format!("accuracy after task {} on task {} is missing", i + 1, j + 1))
        })
    }

    /// Final-row accuracies.
    pub fn per_task_final(&self) -> Result<Vec<f64>> {
        let last = self.tasks().checked_sub(1).ok_or_else(|| Error::State("empty matrix".into()))?;
        (0..self.tasks()).map(|j| self.need(last, j)).collect()
    }

    /// Average final accuracy.
    pub fn acc(&self) -> Result<f64> {
        let row = self.per_task_final()?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean over tasks 2..T of (accuracy just before training the task) minus
    /// the random-init accuracy on it.
    pub fn fwt(&self) -> Result<f64> {
        let t = self.tasks();
        if t < 2 {
            return Err(Error::UndefinedMetric("forward transfer needs at least 2 tasks".into()));
        }
        let mut total = 0.0;
        for i in 1..t {
            let r = self.random[i]
                .ok_or_else(|| Error::State(format!("random baseline for task {} is missing", i + 1)))?;
            total += self.need(i - 1, i)? - r;
        }
        Ok(total / (t - 1) as f64)
    }

    /// Mean over tasks 1..T-1 of final accuracy minus just-trained accuracy.
    /// With `exclude_first`, task 1 is dropped and the divisor is T-2.
    pub fn bwt(&self, exclude_first: bool) -> Result<f64> {
        let t = self.tasks();
        let start = usize::from(exclude_first);
        if t < 2 + start {
            return Err(Error::UndefinedMetric(format!(
                "backward transfer needs at least {} tasks",
                2 + start
            )));
        }
        let mut total = 0.0;
        for i in start..t - 1 {
            total += self.need(t - 1, i)? - self.need(i, i)?;
        }
        Ok(total / (t - 1 - start) as f64)
    }

    /// `after_task,eval_task,accuracy` rows (one-based task numbers) for every
    /// populated entry, in row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "after_task,eval_task,accuracy")?;
        for (i, row) in self.acc.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    writeln!(w, "{},{},{}", i + 1, j + 1, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        let t = self.tasks();
        Ok(MetricSummary {
            acc: self.acc()?,
            fwt: if t >= 2 { Some(self.fwt()?) } else { None },
            bwt: if t >= 2 { Some(self.bwt(false)?) } else { None },
            bwt_excluding_first: if t >= 3 { Some(self.bwt(true)?) } else { None },
            per_task_final: self.per_task_final()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub bwt_excluding_first: Option<f64>,
    pub per_task_final: Vec<f64>,
}

/// Sample mean and standard deviation (n - 1 denominator; zero for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_examples() {
        let m = ResultMatrix::from_rows(vec![vec![1.0; 3]; 3], vec![0.5; 3]).unwrap();
        assert_eq!(m.acc().unwrap(), 1.0);
        let m = ResultMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.6, 0.8]], vec![0.5, 0.5]).unwrap();
        assert!((m.acc().unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn incomplete_matrix_is_a_state_error() {
        let mut m = ResultMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        assert!(matches!(m.acc(), Err(Error::State(_))));
    }

    #[test]
    fn fwt_examples() {
        let m = ResultMatrix::from_rows(
            vec![vec![0.9, 0.5, 0.1], vec![0.8, 0.9, 0.6], vec![0.7, 0.7, 0.9]],
            vec![0.3, 0.5, 0.5],
        )
        .unwrap();
        assert!((m.fwt().unwrap() - 0.05).abs() < 1e-12);
        let m = ResultMatrix::from_rows(vec![vec![0.9, 0.2], vec![0.5, 0.9]], vec![0.5, 0.2]).unwrap();
        assert_eq!(m.fwt().unwrap(), 0.0);
        let one = ResultMatrix::from_rows(vec![vec![0.9]], vec![0.5]).unwrap();
        assert!(matches!(one.fwt(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(one.bwt(false), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bwt_sign_and_zero() {
        let same = ResultMatrix::from_rows(
            vec![vec![0.9, 0.0, 0.0], vec![0.9, 0.8, 0.0], vec![0.9, 0.8, 0.7]],
            vec![0.5; 3],
        )
        .unwrap();
        assert_eq!(same.bwt(false).unwrap(), 0.0);
        let forgot = ResultMatrix::from_rows(
            vec![vec![0.9, 0.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.3, 0.5, 0.7]],
            vec![0.5; 3],
        )
        .unwrap();
        assert!(forgot.bwt(false).unwrap() < 0.0);
        assert!((forgot.bwt(false).unwrap() - (-0.45)).abs() < 1e-12);
        assert!((forgot.bwt(true).unwrap() - (-0.3)).abs() < 1e-12);
    }

    #[test]
    fn single_task_final_equals_acc() {
        let m = ResultMatrix::from_rows(vec![vec![0.42]], vec![0.5]).unwrap();
        assert_eq!(m.per_task_final().unwrap(), vec![0.42]);
        assert_eq!(m.acc().unwrap(), 0.42);
    }

    #[test]
    fn csv_lists_populated_entries() {
        let mut m = ResultMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        m.set(1, 0, 0.25).unwrap();
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "after_task,eval_task,accuracy\n1,1,0.5\n2,1,0.25\n"
        );
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let mut m = ResultMatrix::new(1);
        assert!(m.set(0, 0, 1.5).is_err());
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}

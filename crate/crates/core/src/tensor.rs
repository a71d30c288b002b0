//! Dense row-major tensors and a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Every operation appends a
//! node holding its output value and enough saved state to compute its
//! vector-Jacobian product; [`Graph::backward`] walks the nodes once, in
//! reverse insertion order, which is a valid reverse topological order
//! because inputs are always created before the nodes that consume them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Additive floor applied inside logarithms and divisions.
pub const NUMERIC_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    fn as_matrix_shape(&self) -> Vec<usize> {
        vec![self.rows(), self.cols()]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    NormalizeRows { input: Var, norms: Vec<f64> },
    Softmax { input: Var, temperature: f64 },
    CrossEntropy { pred: Var, target: Var },
    Entropy(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    SelectRows { input: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
    detached: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose k-th `detach` yields `values[k]` instead of its input.
    /// Replaying the detached values of a reference pass this way lets finite
    /// differences see the same stop-gradient targets as the analytic pass.
    pub fn with_frozen_detaches(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on every backward pass.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.frozen {
            Some(values) => {
                let f = values.get(k).expect("more detaches than frozen values").clone();
                assert_eq!(f.shape(), self.nodes[v.0].value.shape(), "frozen detach {k} changed shape");
                f
            }
            None => self.nodes[v.0].value.clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.as_matrix_shape(),
                rhs: tb.as_matrix_shape(),
            });
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Adds a length-`c` vector to every row of an `n×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: ta.as_matrix_shape(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, row), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.rows() != tb.rows() {
            return Err(Error::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Divides every row by its L2 norm. Rows with norm at most
    /// [`NUMERIC_FLOOR`] have no direction; they map to zero and pass no
    /// gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        let mut norms = Vec::with_capacity(ta.rows());
        for chunk in data.chunks_mut(c.max(1)) {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > NUMERIC_FLOOR {
                chunk.iter_mut().for_each(|x| *x /= n);
            } else {
                chunk.iter_mut().for_each(|x| *x = 0.0);
            }
            norms.push(n);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::NormalizeRows { input: a, norms }, rg)
    }

    /// Cosine similarity between every row of `a` (n×d) and every row of `b` (m×d).
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.value(a).cols(), self.value(b).cols());
        if da != db {
            return Err(Error::Dimension {
                op: "cosine_sim",
                lhs: self.value(a).as_matrix_shape(),
                rhs: self.value(b).as_matrix_shape(),
            });
        }
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Row-wise softmax of `logits / temperature`. Columns with a false mask
    /// entry are excluded and come out exactly zero.
    pub fn softmax_t(&mut self, logits: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(logits);
        let c = t.cols();
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::Dimension {
                    op: "softmax_t mask",
                    lhs: t.as_matrix_shape(),
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::DegenerateMask);
            }
        }
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut data = vec![0.0; t.len()];
        for (row_in, row_out) in t.data().chunks(c.max(1)).zip(data.chunks_mut(c.max(1))) {
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row_in[j] / temperature)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row_in[j] / temperature - max).exp();
                    row_out[j] = e;
                    total += e;
                }
            }
            row_out.iter_mut().for_each(|x| *x /= total);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor { shape, data },
            Op::Softmax {
                input: logits,
                temperature,
            },
            rg,
        ))
    }

    /// Mean over rows of `-sum_c target * ln(pred + floor)`. The target is
    /// treated as a constant.
    pub fn cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.rows() != tt.rows() || tp.cols() != tt.cols() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tp.as_matrix_shape(),
                rhs: tt.as_matrix_shape(),
            });
        }
        check_simplex(tp, "prediction")?;
        check_simplex(tt, "target")?;
        let n = tp.rows() as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * (p + NUMERIC_FLOOR).ln() })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(total / n), Op::CrossEntropy { pred, target }, rg))
    }

    /// Mean over rows of the Shannon entropy `-sum_c p ln(p + floor)`.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let tp = self.value(p);
        if tp.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("entropy of negative probabilities".into()));
        }
        let n = tp.rows() as f64;
        let total: f64 = tp.data().iter().map(|&x| -x * (x + NUMERIC_FLOOR).ln()).sum();
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(total / n), Op::Entropy(p), rg))
    }

    /// Column means: n×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for row in t.data().chunks(c.max(1)) {
            for (acc, x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![1, c],
                data,
            },
            Op::MeanRows(a),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Shape(format!(
                "row index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let out = t.select_rows(rows);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::Shape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    self.value(v).shape()
                )));
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Shape("weighted_sum of no terms".into()))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.value(loss).shape().to_vec(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref().and_then(|g| g[v.0].as_ref())
    }

    /// Drops gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let bt = tb.transpose();
                    let da = matmul_raw(up.data(), bt.data(), m, n, k);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let at = ta.transpose();
                    let db = matmul_raw(at.data(), up.data(), k, m, n);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), up.data().to_vec());
                }
                if self.rg(*row) {
                    let c = out.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in up.data().chunks(c.max(1)) {
                        for (acc, g) in dr.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, *row, self.value(*row).shape(), dr);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(grads, *v, self.value(*v).shape(), up.data().to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), up.data().to_vec());
                }
                if self.rg(*b) {
                    let neg = up.data().iter().map(|g| -g).collect();
                    accumulate(grads, *b, self.value(*b).shape(), neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = up.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.rg(*b) {
                    let d = up.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, tb.shape(), d);
                }
            }
            Op::Scale(a, f) => {
                let d = up.data().iter().map(|g| g * f).collect();
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = up
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::Transpose(a) => {
                let d = up.transpose().into_data();
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::NormalizeRows { input, norms } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for (i, &n) in norms.iter().enumerate() {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let g = &up.data()[i * c..(i + 1) * c];
                    let dst = &mut d[i * c..(i + 1) * c];
                    if n > NUMERIC_FLOOR {
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = (g[j] - y[j] * dot) / n;
                        }
                    }
                }
                accumulate(grads, *input, self.value(*input).shape(), d);
            }
            Op::Softmax { input, temperature } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((y, g), dst) in out
                    .data()
                    .chunks(c.max(1))
                    .zip(up.data().chunks(c.max(1)))
                    .zip(d.chunks_mut(c.max(1)))
                {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = y[j] * (g[j] - dot) / temperature;
                    }
                }
                accumulate(grads, *input, self.value(*input).shape(), d);
            }
            Op::CrossEntropy { pred, target } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let scale = up.item() / tp.rows() as f64;
                let d = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(&p, &t)| -scale * t / (p + NUMERIC_FLOOR))
                    .collect();
                accumulate(grads, *pred, tp.shape(), d);
            }
            Op::Entropy(p) => {
                let tp = self.value(*p);
                let scale = up.item() / tp.rows() as f64;
                let d = tp
                    .data()
                    .iter()
                    .map(|&x| -scale * ((x + NUMERIC_FLOOR).ln() + x / (x + NUMERIC_FLOOR)))
                    .collect();
                accumulate(grads, *p, tp.shape(), d);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let r = ta.rows() as f64;
                let c = ta.cols();
                let mut d = Vec::with_capacity(ta.len());
                for _ in 0..ta.rows() {
                    d.extend(up.data()[..c].iter().map(|g| g / r));
                }
                accumulate(grads, *a, ta.shape(), d);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), vec![up.item(); ta.len()]);
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let g = up.item() / ta.len() as f64;
                accumulate(grads, *a, ta.shape(), vec![g; ta.len()]);
            }
            Op::SelectRows { input, rows } => {
                let ti = self.value(*input);
                let c = ti.cols();
                let mut d = vec![0.0; ti.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += up.data()[k * c + j];
                    }
                }
                accumulate(grads, *input, ti.shape(), d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta,
            });
        }
    }
}

fn check_simplex(t: &Tensor, what: &str) -> Result<()> {
    if let Some(x) = t.data().iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain(format!("{what} has invalid entry {x}")));
    }
    for (i, row) in t.data().chunks(t.cols().max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("{what} row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Plain row-major product of an m×k and a k×n buffer.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 0.0]]));
        let b = g.constant(t(&[&[0.0], &[1.0]]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1]);
        assert_eq!(g.value(out).item(), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0]]));
        let y = g.softmax_t(x, 1.0, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[&[1.0, 1.0, 7.0]]));
        let y = g.softmax_t(x, 1.0, Some(&[true, true, false])).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[2.0, 1.0]]));
        let y = g.softmax_t(x, 0.1, None).unwrap();
        let (e0, e1) = ((2.0f64 / 0.1).exp(), (1.0f64 / 0.1).exp());
        let expected = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_parameters() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0]]));
        assert!(matches!(g.softmax_t(x, 0.0, None), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax_t(x, -1.0, None), Err(Error::Parameter(_))));
        assert!(matches!(
            g.softmax_t(x, 1.0, Some(&[false, false])),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn cosine_basic_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[3.0, 4.0], &[1.0, 0.0]]));
        let b = g.constant(t(&[&[3.0, 4.0], &[0.0, 1.0]]));
        let s = g.cosine_sim(a, b).unwrap();
        let v = g.value(s);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(v.get(1, 1), 0.0);
    }

    #[test]
    fn cosine_zero_row_is_finite() {
        let mut g = Graph::new();
        let a = g.param(t(&[&[0.0, 0.0]]));
        let b = g.constant(t(&[&[1.0, 0.0]]));
        let s = g.cosine_sim(a, b).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_and_equal() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::filled(vec![1, 4], 0.25));
        let ce = g.cross_entropy(u, u).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-9);

        let p = g.constant(t(&[&[0.7, 0.2, 0.1]]));
        let ce = g.cross_entropy(p, p).unwrap();
        let h = g.entropy(p).unwrap();
        assert!((g.value(ce).item() - g.value(h).item()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_negative() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[0.5, 0.5]]));
        let bad = g.constant(t(&[&[1.5, -0.5]]));
        assert!(matches!(g.cross_entropy(p, bad), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_target_gets_no_gradient() {
        let mut g = Graph::new();
        let lp = g.param(t(&[&[0.3, -0.2]]));
        let lt = g.param(t(&[&[1.0, 0.0]]));
        let p = g.softmax_t(lp, 1.0, None).unwrap();
        let q = g.softmax_t(lt, 1.0, None).unwrap();
        let ce = g.cross_entropy(p, q).unwrap();
        g.backward(ce).unwrap();
        assert!(g.grad(lt).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(g.grad(lp).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn backward_sum_and_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, -2.0, 3.0]]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, -2.0, 3.0]]));
        let z = g.scale(x, 0.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_repeat_and_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.zero_grad();
        g.backward(s).unwrap();
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0]]));
        let unused = g.param(t(&[&[1.0, 2.0]]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }
}

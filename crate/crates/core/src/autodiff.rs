//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the handful of operations the prototype model needs are supported.
//! A [`Tape`] owns every value computed during a forward pass; operations
//! return lightweight [`Var`] handles into it. After [`Tape::backward`] the
//! gradient of every node that depends on a `requires_grad` leaf is
//! available through [`Tape::grad`].
//!
//! All reductions accumulate left to right in row-major order, so forward
//! and backward results are bitwise reproducible for identical inputs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: cannot reduce an empty set of rows")]
    EmptyRows { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels supplied for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("leaky_relu slope {0} outside [0, 1]")]
    InvalidSlope(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset gradients first")]
    AlreadyBackpropagated,
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64`.
///
/// Scalars have an empty shape and hold exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::matrix(n, n, data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
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
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        self.dims2().ok_or_else(|| AutodiffError::NotMatrix {
            op,
            shape: self.shape.clone(),
        })
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        match self.dims2() {
            Some((r, _)) => (0..r).map(|i| self.row(i).to_vec()).collect(),
            None => vec![self.data.clone()],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    RowMean(Var),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    PairwiseSqDist(Var, Var),
    PairwiseDist(Var, Var),
    Scale(Var, f64),
    Axpby(f64, Var, f64, Var),
    Mul(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted and a single reverse sweep visits each op once.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backpropagated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable input whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backpropagated = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.expect_matrix("matmul")?;
        let (k2, n) = tb.expect_matrix("matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        let (m, n) = tx.expect_matrix("add_bias")?;
        if tb.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut out = tx.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&slope) {
            return Err(AutodiffError::InvalidSlope(slope));
        }
        let tx = self.check(x)?;
        let data = tx
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LeakyRelu(x, slope), rg))
    }

    /// Mean over the rows of an `m x d` matrix, giving a length-`d` vector.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let (m, d) = match tx.shape.as_slice() {
            [m, d] => (*m, *d),
            [d] => (1, *d),
            _ => {
                return Err(AutodiffError::NotMatrix {
                    op: "row_mean",
                    shape: tx.shape.clone(),
                })
            }
        };
        if m == 0 {
            return Err(AutodiffError::EmptyRows { op: "row_mean" });
        }
        let mut out = vec![0.0; d];
        for row in tx.data.chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = m as f64;
        for o in &mut out {
            *o /= inv;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(out)?, Op::RowMean(x), rg))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.check(x)?;
        let (m, d) = tx.expect_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(AutodiffError::EmptyRows { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= m {
                return Err(AutodiffError::RowOutOfRange { index: i, rows: m });
            }
            out.extend_from_slice(tx.row(i));
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::matrix(indices.len(), d, out)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Stacks equally long vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(AutodiffError::EmptyRows { op: "stack_rows" });
        }
        let d = self.check(rows[0])?.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.check(r)?;
            if t.len() != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![d],
                    right: t.shape.clone(),
                });
            }
            out.extend_from_slice(&t.data);
        }
        let rg = self.any_grad(rows);
        let value = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Squared Euclidean distance between every row of `q` and every row of `p`.
    pub fn pairwise_sq_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (value, rg) = self.sq_dist_value(q, p, "pairwise_sq_dist")?;
        Ok(self.push(value, Op::PairwiseSqDist(q, p), rg))
    }

    /// Euclidean distance between every row of `q` and every row of `p`.
    ///
    /// The gradient at zero distance is taken to be zero.
    pub fn pairwise_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (mut value, rg) = self.sq_dist_value(q, p, "pairwise_dist")?;
        for v in &mut value.data {
            *v = v.sqrt();
        }
        Ok(self.push(value, Op::PairwiseDist(q, p), rg))
    }

    fn sq_dist_value(&self, q: Var, p: Var, op: &'static str) -> Result<(Tensor, bool)> {
        let (tq, tp) = (self.check(q)?, self.check(p)?);
        let (nq, d) = tq.expect_matrix(op)?;
        let (np, d2) = tp.expect_matrix(op)?;
        if d != d2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: tq.shape.clone(),
                right: tp.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(nq * np);
        for i in 0..nq {
            let qi = tq.row(i);
            for n in 0..np {
                let pn = tp.row(n);
                let mut acc = 0.0;
                for (a, b) in qi.iter().zip(pn) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                out.push(acc);
            }
        }
        Ok((Tensor::matrix(nq, np, out)?, self.any_grad(&[q, p])))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.check(x)?;
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| factor * v).collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), rg))
    }

    /// `a * x + b * y`, elementwise.
    pub fn axpby(&mut self, a: f64, x: Var, b: f64, y: Var) -> Result<Var> {
        let (tx, ty) = (self.check(x)?, self.check(y)?);
        if tx.shape != ty.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "axpby",
                left: tx.shape.clone(),
                right: ty.shape.clone(),
            });
        }
        let data = tx
            .data
            .iter()
            .zip(&ty.data)
            .map(|(u, v)| a * u + b * v)
            .collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(value, Op::Axpby(a, x, b, y), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.check(x)?, self.check(y)?);
        if tx.shape != ty.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                left: tx.shape.clone(),
                right: ty.shape.clone(),
            });
        }
        let data = tx.data.iter().zip(&ty.data).map(|(u, v)| u * v).collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(value, Op::Mul(x, y), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let total = tx.data.iter().fold(0.0, |acc, v| acc + v);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Mean negative log-softmax of the labelled entry of each row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.check(logits)?;
        let (rows, classes) = tl.expect_matrix("softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(AutodiffError::LabelCount {
                labels: labels.len(),
                rows,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = tl.row(i);
            let (arg, max) = argmax(row);
            // The max entry contributes exp(0) = 1, so log-sum-exp = max + ln_1p(rest).
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .fold(0.0, |acc, (_, &v)| acc + (v - max).exp());
            let log_norm = rest.ln_1p();
            total += (max - row[label]) + log_norm;
            let denom = 1.0 + rest;
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let loss = total / rows as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that depends on a
    /// `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let tl = self.check(loss)?;
        if !tl.is_scalar() {
            return Err(AutodiffError::NonScalar(tl.shape.clone()));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let shape = self.nodes[idx].value.shape.clone();
            self.nodes[idx].grad = Some(Tensor { shape, data: g });
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if wants(a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.data[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (x, y) in gi.iter().zip(bp) {
                                acc += x * y;
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (o, x) in row.iter_mut().zip(gi) {
                                *o += aip * x;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let tx = &self.nodes[x.0].value;
                let dx = tx
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::RowMean(x) => {
                let tx = &self.nodes[x.0].value;
                let d = g.len();
                let m = tx.len() / d;
                let inv = m as f64;
                let mut dx = Vec::with_capacity(tx.len());
                for _ in 0..m {
                    dx.extend(g.iter().map(|v| v / inv));
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows(x, indices) => {
                let tx = &self.nodes[x.0].value;
                let d = tx.shape[1];
                let mut dx = vec![0.0; tx.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::StackRows(rows) => {
                let d = g.len() / rows.len();
                for (r, v) in rows.iter().enumerate() {
                    if wants(v) {
                        accumulate(grads, *v, g[r * d..(r + 1) * d].to_vec());
                    }
                }
            }
            Op::PairwiseSqDist(q, p) | Op::PairwiseDist(q, p) => {
                let squared = matches!(node.op, Op::PairwiseSqDist(..));
                let tq = &self.nodes[q.0].value;
                let tp = &self.nodes[p.0].value;
                let (nq, d) = (tq.shape[0], tq.shape[1]);
                let np = tp.shape[0];
                let mut dq = vec![0.0; nq * d];
                let mut dp = vec![0.0; np * d];
                for i in 0..nq {
                    for n in 0..np {
                        // coefficient c such that d(dist)/dq = c * (q - p)
                        let c = if squared {
                            2.0 * g[i * np + n]
                        } else {
                            let dist = node.value.data[i * np + n];
                            if dist > 0.0 {
                                g[i * np + n] / dist
                            } else {
                                0.0
                            }
                        };
                        for j in 0..d {
                            let diff = tq.data[i * d + j] - tp.data[n * d + j];
                            dq[i * d + j] += c * diff;
                            dp[n * d + j] -= c * diff;
                        }
                    }
                }
                if wants(q) {
                    accumulate(grads, *q, dq);
                }
                if wants(p) {
                    accumulate(grads, *p, dp);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.iter().map(|v| factor * v).collect());
            }
            Op::Axpby(a, x, b, y) => {
                if wants(x) {
                    accumulate(grads, *x, g.iter().map(|v| a * v).collect());
                }
                if wants(y) {
                    accumulate(grads, *y, g.iter().map(|v| b * v).collect());
                }
            }
            Op::Mul(x, y) => {
                let tx = &self.nodes[x.0].value;
                let ty = &self.nodes[y.0].value;
                if wants(x) {
                    let dx = g.iter().zip(&ty.data).map(|(gv, v)| gv * v).collect();
                    accumulate(grads, *x, dx);
                }
                if wants(y) {
                    let dy = g.iter().zip(&tx.data).map(|(gv, v)| gv * v).collect();
                    accumulate(grads, *y, dy);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut dx = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    dx[i * classes + label] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                accumulate(grads, *logits, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(bp) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Index and value of the first maximal entry.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Row-wise softmax of a matrix, stabilised by max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.shape.last().copied().unwrap_or(1);
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data.chunks_exact(cols) {
        let (_, max) = argmax(row);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total = exps.iter().fold(0.0, |acc, v| acc + v);
        data.extend(exps.iter().map(|e| e / total));
    }
    Tensor {
        shape: logits.shape.clone(),
        data,
    }
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` maps the leaves `xs` (registered in order) to a scalar. Returns the
/// largest per-coordinate `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check_many<F, E>(f: F, xs: &[Tensor], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()).expect("non-empty shape"))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(AutodiffError::NonScalar(value.shape.clone()).into());
        }
        Ok(value.item())
    };

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for t in 0..xs.len() {
        for c in 0..xs[t].len() {
            let orig = inputs[t].data[c];
            inputs[t].data[c] = orig + step;
            let plus = eval(&inputs)?;
            inputs[t].data[c] = orig - step;
            let minus = eval(&inputs)?;
            inputs[t].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data[c];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

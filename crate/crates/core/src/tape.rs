//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are either
//! trainable parameters ([`Tape::param`]) or constants ([`Tape::constant`]);
//! every other node records the primitive that produced it. Calling
//! [`Tape::backward`] on a `1x1` node accumulates gradients into the trainable
//! leaves. Gradients accumulate across calls until [`Tape::zero_grad`].

use crate::error::{contract, Error, Result, Shape};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate miscalculation injected into a backward rule. Only used to prove
/// that the gradient check can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SigmoidGrad,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    TileRows(Var),
    GatherRows(Var, Vec<usize>),
    VStack(Vec<Var>),
    NormalizeRows(Var, Vec<f64>),
    CrossEntropyRows(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
    trainable: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            trainable: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Registers a trainable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Matrix) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    /// `a + row`, with the `1 x d` row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(row))?;
        let t = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), t))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), t))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, factor), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let t = self.tracked(&[a]);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        let t = self.tracked(&[a]);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let t = self.tracked(&[a]);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    /// Mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let t = self.tracked(&[a]);
        self.push(value, Op::MeanRows(a), t)
    }

    /// Repeats a `1 x d` row `n` times.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let value = self.value(a).tile_rows(n)?;
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::TileRows(a), t))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if indices.is_empty() {
            return Err(contract("gather_rows needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(contract(format!("row index {bad} out of range for {} table", src.shape())));
        }
        let mut data = Vec::with_capacity(indices.len() * src.cols());
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::new(indices.len(), src.cols(), data)?;
        let t = self.tracked(&[table]);
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), t))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&values)?;
        let t = self.tracked(parts);
        Ok(self.push(value, Op::VStack(parts.to_vec()), t))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut norms = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.rows() * src.cols());
        for i in 0..src.rows() {
            let row = src.row(i);
            let n = crate::matrix::norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateVector(format!("row {i} has norm {n}")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let value = Matrix::new(src.rows(), src.cols(), data)?;
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::NormalizeRows(a, norms), t))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target
    /// column. Produces a `1x1` node.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                left: l.shape(),
                right: Shape(targets.len(), 1),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= l.cols() {
                return Err(contract(format!("target {t} out of range for {} logits", l.shape())));
            }
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Matrix::filled(1, 1, total / targets.len() as f64);
        let tr = self.tracked(&[logits]);
        Ok(self.push(value, Op::CrossEntropyRows(logits, targets.to_vec()), tr))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::Sum(a), t)
    }

    /// Reverse pass from a `1x1` node. Adds into the accumulated gradient of
    /// every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != Shape(1, 1) {
            return Err(contract(format!("backward needs a scalar loss, got {shape}")));
        }
        let mut buf: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        buf[loss.0] = Some(Matrix::ones(1, 1));

        for i in (0..=loss.0).rev() {
            let Some(g) = buf[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if node.trainable {
                accumulate(&mut self.grads, i, g);
                continue;
            }
            for (target, contribution) in self.local_grads(node, &g)? {
                if self.nodes[target.0].tracked {
                    accumulate(&mut buf, target.0, contribution);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose())?),
                (*b, val(*a).transpose().matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let summed = g.mean_rows().scale(g.rows() as f64);
                vec![(*a, g.clone()), (*row, summed)]
            }
            Op::Hadamard(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::Scale(a, factor) => vec![(*a, g.scale(*factor))],
            Op::Sigmoid(a) => {
                let local = out.map(|y| y * (1.0 - y));
                let mut d = g.hadamard(&local)?;
                if self.fault == Some(Fault::SigmoidGrad) {
                    d = d.scale(1.1);
                }
                vec![(*a, d)]
            }
            Op::Tanh(a) => vec![(*a, g.hadamard(&out.map(|y| 1.0 - y * y))?)],
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let inner = crate::matrix::dot(y, gy);
                    for j in 0..out.cols() {
                        d.set(i, j, y[j] * (gy[j] - inner));
                    }
                }
                vec![(*a, d)]
            }
            Op::MeanRows(a) => {
                let n = val(*a).rows();
                vec![(*a, g.scale(1.0 / n as f64).tile_rows(n)?)]
            }
            Op::TileRows(a) => vec![(*a, g.mean_rows().scale(g.rows() as f64))],
            Op::GatherRows(table, indices) => {
                let t = val(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..t.cols() {
                        d.set(i, j, d.get(i, j) + g.get(k, j));
                    }
                }
                vec![(*table, d)]
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = val(p).rows();
                    let cols = g.cols();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    grads.push((p, Matrix::new(rows, cols, slice)?));
                    offset += rows;
                }
                grads
            }
            Op::NormalizeRows(a, norms) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for (i, &n) in norms.iter().enumerate() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let proj = crate::matrix::dot(y, gy);
                    for j in 0..out.cols() {
                        d.set(i, j, (gy[j] - y[j] * proj) / n);
                    }
                }
                vec![(*a, d)]
            }
            Op::CrossEntropyRows(logits, targets) => {
                let l = val(*logits);
                let mut d = l.softmax_rows();
                let scale = g.get(0, 0) / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    d.set(i, t, d.get(i, t) - 1.0);
                }
                vec![(*logits, d.scale(scale))]
            }
            Op::Sum(a) => {
                let s = val(*a).shape();
                vec![(*a, Matrix::filled(s.0, s.1, g.get(0, 0)))]
            }
        })
    }

    /// Accumulated gradient of `v`; zeros when nothing has reached it.
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let s = self.value(v).shape();
                Matrix::zeros(s.0, s.1)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}

fn accumulate(buf: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    buf[idx] = Some(match buf[idx].take() {
        Some(prev) => prev.add(&g).expect("gradient shapes agree by construction"),
        None => g,
    });
}

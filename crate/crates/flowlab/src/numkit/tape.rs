//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in construction order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once and accumulates adjoints into per-node
//! gradient tensors. The primitive set is the minimum an MLP with bias,
//! tanh activations, dropout scaling, embeddings, and a squared-error head
//! needs.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A x B for 2-D A (m x k) and B (k x n).
    MatMul(NodeId, NodeId),
    /// Elementwise A + B, same shape.
    Add(NodeId, NodeId),
    /// Elementwise A - B, same shape.
    Sub(NodeId, NodeId),
    /// Row broadcast: C[i][j] = A[i][j] + v[j].
    AddRow(NodeId, NodeId),
    /// Row broadcast: C[i][j] = A[i][j] * v[j].
    MulRow(NodeId, NodeId),
    /// Elementwise A * B, same shape.
    Mul(NodeId, NodeId),
    /// k * A for a constant k.
    Scale(NodeId, f64),
    Tanh(NodeId),
    /// Sum of all entries, producing a scalar.
    Sum(NodeId),
    /// Row lookup into a table: C[i] = table[rows[i]].
    Gather { table: NodeId, rows: Vec<usize> },
    /// Column-wise concatenation of 2-D nodes with equal row counts.
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient w.r.t. a node; zero tensors are materialized, unreachable
    /// nodes return None.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.g[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Dim(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av.at(i, p) * bv.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b)))
    }

    /// Add a length-n vector to every row of an (m x n) matrix.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.row_broadcast(a, v, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, v)))
    }

    /// Multiply every row of an (m x n) matrix by a length-n vector.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.row_broadcast(a, v, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, v)))
    }

    fn row_broadcast(
        &self,
        a: NodeId,
        v: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, vv) = (self.value(a), self.value(v));
        if av.shape().len() != 2 || vv.len() != av.cols() {
            return Err(Error::Dim(format!(
                "{what} {:?} with vector of {}",
                av.shape(),
                vv.len()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = f(av.at(i, j), vv.data()[j]);
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| k * x).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Tanh(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Gather rows of a 2-D table; gradient scatter-adds into the table.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dim("gather table must be 2-d".into()));
        }
        let (nrows, width) = (tv.rows(), tv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Domain(format!(
                "gather row {bad} out of range (table has {nrows})"
            )));
        }
        let mut out = vec![0.0; rows.len() * width];
        for (i, &r) in rows.iter().enumerate() {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&tv.data()[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), width], out),
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Concatenate 2-D nodes along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != m {
                return Err(Error::Dim("concat_cols row mismatch".into()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Dim("backward root must be scalar".into()));
        }
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(out_grad) = g[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = dC * B^T
                    let ga = ensure(&mut g, *a, av.shape());
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += out_grad.data()[i * n + j] * bv.at(p, j);
                            }
                            ga.data_mut()[i * k + p] += acc;
                        }
                    }
                    // dB = A^T * dC
                    let gb = ensure(&mut g, *b, bv.shape());
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.at(i, p) * out_grad.data()[i * n + j];
                            }
                            gb.data_mut()[p * n + j] += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, out_grad.data(), 1.0, self.value(*a).shape());
                    accumulate(&mut g, *b, out_grad.data(), 1.0, self.value(*b).shape());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, out_grad.data(), 1.0, self.value(*a).shape());
                    accumulate(&mut g, *b, out_grad.data(), -1.0, self.value(*b).shape());
                }
                Op::AddRow(a, v) => {
                    accumulate(&mut g, *a, out_grad.data(), 1.0, self.value(*a).shape());
                    let n = self.value(*v).len();
                    let m = self.value(*a).rows();
                    let gv = ensure(&mut g, *v, self.value(*v).shape());
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += out_grad.data()[i * n + j];
                        }
                        gv.data_mut()[j] += acc;
                    }
                }
                Op::MulRow(a, v) => {
                    let av = self.value(*a);
                    let vv = self.value(*v);
                    let (m, n) = (av.rows(), av.cols());
                    let ga = ensure(&mut g, *a, av.shape());
                    for i in 0..m {
                        for j in 0..n {
                            ga.data_mut()[i * n + j] += out_grad.data()[i * n + j] * vv.data()[j];
                        }
                    }
                    let gv = ensure(&mut g, *v, vv.shape());
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += out_grad.data()[i * n + j] * av.at(i, j);
                        }
                        gv.data_mut()[j] += acc;
                    }
                }
                Op::Mul(a, b) => {
                    let bd: Vec<f64> = self.value(*b).data().to_vec();
                    let ad: Vec<f64> = self.value(*a).data().to_vec();
                    let ga = ensure(&mut g, *a, self.value(*a).shape());
                    for (gi, (oi, bi)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(out_grad.data().iter().zip(bd.iter()))
                    {
                        *gi += oi * bi;
                    }
                    let gb = ensure(&mut g, *b, self.value(*b).shape());
                    for (gi, (oi, ai)) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(out_grad.data().iter().zip(ad.iter()))
                    {
                        *gi += oi * ai;
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut g, *a, out_grad.data(), *k, self.value(*a).shape());
                }
                Op::Tanh(a) => {
                    let yv: Vec<f64> = self.nodes[idx].value.data().to_vec();
                    let ga = ensure(&mut g, *a, self.value(*a).shape());
                    for (gi, (oi, yi)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(out_grad.data().iter().zip(yv.iter()))
                    {
                        *gi += oi * (1.0 - yi * yi);
                    }
                }
                Op::Sum(a) => {
                    let s = out_grad.data()[0];
                    let n = self.value(*a).len();
                    let ga = ensure(&mut g, *a, self.value(*a).shape());
                    for i in 0..n {
                        ga.data_mut()[i] += s;
                    }
                }
                Op::Gather { table, rows } => {
                    let width = self.value(*table).cols();
                    let gt = ensure(&mut g, *table, self.value(*table).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..width {
                            gt.data_mut()[r * width + j] += out_grad.data()[i * width + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = self.nodes[idx].value.cols();
                    let m = self.nodes[idx].value.rows();
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| self.value(p).cols()).collect();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths.iter()) {
                        let gp = ensure(&mut g, p, self.value(p).shape());
                        for i in 0..m {
                            for j in 0..w {
                                gp.data_mut()[i * w + j] +=
                                    out_grad.data()[i * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
            }
            g[idx] = Some(out_grad);
        }
        Ok(Grads { g })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn ensure<'a>(g: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    if g[id.0].is_none() {
        g[id.0] = Some(Tensor::zeros(shape));
    }
    g[id.0].as_mut().unwrap()
}

fn accumulate(g: &mut [Option<Tensor>], id: NodeId, upstream: &[f64], k: f64, shape: &[usize]) {
    let t = ensure(g, id, shape);
    for (gi, ui) in t.data_mut().iter_mut().zip(upstream.iter()) {
        *gi += k * ui;
    }
}

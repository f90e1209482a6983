use super::tensor::gemm;
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    SegmentMax { x: NodeId, argmax: Vec<usize> },
    DotScores { a: NodeId, b: NodeId },
    SoftmaxTau { x: NodeId, tau: f64 },
    CrossEntropy { x: NodeId, probs: Tensor, labels: Vec<usize> },
    SoftCrossEntropy { x: NodeId, probs: Tensor, target: Tensor, tau: f64 },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
}

#[derive(Debug)]
enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

#[derive(Debug)]
struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Single-use computation graph for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the creation order is a
/// topological order and backward simply walks it in reverse. Parameter
/// leaves borrow their values from a [`ParamStore`]; gradients are returned
/// as a [`Gradients`] set and accumulated into the store by the caller.
#[derive(Debug)]
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Input,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A parameter leaf. Frozen parameters behave like constants.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let params = self.params;
        self.nodes.push(Node {
            value: Value::Borrowed(params.value(id)),
            op: Op::Param(id),
            requires_grad: params.is_trainable(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x[b x p] * w[p x q] + bias[q]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let (rows, p) = (xv.shape()[0], xv.shape()[1]);
        let (p2, q) = (wv.shape()[0], wv.shape()[1]);
        if p != p2 {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        if bv.len() != q {
            return Err(Error::shape("linear bias", wv.shape(), bv.shape()));
        }
        let mut out = vec![0.0; rows * q];
        for row in out.chunks_exact_mut(q) {
            row.copy_from_slice(bv.data());
        }
        gemm(rows, p, q, xv.data(), false, wv.data(), false, &mut out, true);
        let value = Tensor::new(vec![rows, q], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Column-wise max over the rows of an `n x c` matrix, giving `[c]`.
    pub fn max_reduce_points(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("max_reduce_points", &shape, &[0, 0]));
        }
        let n = shape[0];
        let pooled = self.segment_max(x, n)?;
        let value = self.value(pooled).clone().reshape(vec![shape[1]])?;
        // Re-label the pooled node as a vector without copying the op.
        self.nodes[pooled.0].value = Value::Owned(value);
        Ok(pooled)
    }

    /// Max over consecutive groups of `segment` rows: `[(s*segment) x c] -> [s x c]`.
    /// Ties route the gradient to the lowest row index.
    pub fn segment_max(&mut self, x: NodeId, segment: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = match xv.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("segment_max", s, &[0, 0])),
        };
        if segment == 0 || rows == 0 {
            return Err(Error::EmptyCloud);
        }
        if rows % segment != 0 {
            return Err(Error::shape("segment_max", xv.shape(), &[segment]));
        }
        let segments = rows / segment;
        let data = xv.data();
        let mut out = vec![f64::NEG_INFINITY; segments * cols];
        let mut argmax = vec![0usize; segments * cols];
        for s in 0..segments {
            let o = &mut out[s * cols..(s + 1) * cols];
            let a = &mut argmax[s * cols..(s + 1) * cols];
            for r in s * segment..(s + 1) * segment {
                let row = &data[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    if row[j] > o[j] {
                        o[j] = row[j];
                        a[j] = r;
                    }
                }
            }
        }
        let value = Tensor::new(vec![segments, cols], out)?;
        Ok(self.push(value, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Pairwise row dot products: `a[B x k] . b[C x k]^T -> [B x C]`.
    pub fn dot_scores(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape("dot_scores", av.shape(), bv.shape()));
        }
        let (rows, k, classes) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; rows * classes];
        gemm(rows, k, classes, av.data(), false, bv.data(), true, &mut out, false);
        let value = Tensor::new(vec![rows, classes], out)?;
        Ok(self.push(value, Op::DotScores { a, b }, &[a, b]))
    }

    /// Row-wise temperature softmax over the last dimension.
    pub fn softmax_tau(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let value = softmax_tau_rows(self.value(x), tau)?;
        Ok(self.push(value, Op::SoftmaxTau { x, tau }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax
    /// of `scores` (`[B x C]`, or `[C]` for a single sample).
    pub fn cross_entropy(&mut self, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sv = self.value(scores);
        let (rows, classes) = sv.dims2();
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", sv.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Contract(format!(
                    "label index {label} out of range for {classes} classes"
                )));
            }
            let row = sv.row(i);
            total += log_sum_exp(row) - row[label];
        }
        let probs = softmax_tau_rows(sv, 1.0)?;
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                x: scores,
                probs,
                labels: labels.to_vec(),
            },
            &[scores],
        ))
    }

    /// Mean cross-entropy `-(1/B) sum q log softmax(scores / tau)` against a
    /// constant target distribution `target` of the same shape.
    pub fn soft_cross_entropy(
        &mut self,
        scores: NodeId,
        target: &Tensor,
        tau: f64,
    ) -> Result<NodeId> {
        check_tau(tau)?;
        let sv = self.value(scores);
        if sv.shape() != target.shape() {
            return Err(Error::shape("soft_cross_entropy", sv.shape(), target.shape()));
        }
        let (rows, _) = sv.dims2();
        let mut total = 0.0;
        for i in 0..rows {
            let z: Vec<f64> = sv.row(i).iter().map(|s| s / tau).collect();
            let lse = log_sum_exp(&z);
            total -= target
                .row(i)
                .iter()
                .zip(&z)
                .map(|(q, zj)| q * (zj - lse))
                .sum::<f64>();
        }
        let probs = softmax_tau_rows(sv, tau)?;
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                x: scores,
                probs,
                target: target.clone(),
                tau,
            },
            &[scores],
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`; returns the gradient of every
    /// trainable parameter reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => out.push((*id, g)),
                },
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (rows, p) = (xv.shape()[0], xv.shape()[1]);
                    let q = wv.shape()[1];
                    if self.wants(*x) {
                        let mut dx = vec![0.0; rows * p];
                        gemm(rows, q, p, g.data(), false, wv.data(), true, &mut dx, false);
                        accumulate(&mut grads, *x, Tensor::new(vec![rows, p], dx)?);
                    }
                    if self.wants(*w) {
                        let mut dw = vec![0.0; p * q];
                        gemm(p, rows, q, xv.data(), true, g.data(), false, &mut dw, false);
                        accumulate(&mut grads, *w, Tensor::new(vec![p, q], dw)?);
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; q];
                        for row in g.data().chunks_exact(q) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::vector(db));
                    }
                }
                Op::Relu(x) => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let data = g
                            .data()
                            .iter()
                            .zip(xv.data())
                            .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                    }
                }
                Op::SegmentMax { x, argmax } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let cols = xv.shape()[1];
                        let mut dx = Tensor::zeros(xv.shape());
                        let d = dx.data_mut();
                        for (slot, (&row, gv)) in argmax.iter().zip(g.data()).enumerate() {
                            d[row * cols + slot % cols] += gv;
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::DotScores { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (rows, k, classes) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    if self.wants(*a) {
                        let mut da = vec![0.0; rows * k];
                        gemm(rows, classes, k, g.data(), false, bv.data(), false, &mut da, false);
                        accumulate(&mut grads, *a, Tensor::new(vec![rows, k], da)?);
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; classes * k];
                        gemm(classes, rows, k, g.data(), true, av.data(), false, &mut db, false);
                        accumulate(&mut grads, *b, Tensor::new(vec![classes, k], db)?);
                    }
                }
                Op::SoftmaxTau { x, tau } => {
                    if self.wants(*x) {
                        let p = self.value(NodeId(i));
                        let (rows, cols) = p.dims2();
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let pr = p.row(r);
                            let gr = g.row(r);
                            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                dx[r * cols + j] = pr[j] * (gr[j] - dot) / tau;
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(p.shape().to_vec(), dx)?);
                    }
                }
                Op::CrossEntropy { x, probs, labels } => {
                    if self.wants(*x) {
                        let upstream = g.data()[0] / labels.len() as f64;
                        let (_, cols) = probs.dims2();
                        let mut dx = probs.clone();
                        let d = dx.data_mut();
                        for (r, &label) in labels.iter().enumerate() {
                            d[r * cols + label] -= 1.0;
                        }
                        d.iter_mut().for_each(|v| *v *= upstream);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SoftCrossEntropy {
                    x,
                    probs,
                    target,
                    tau,
                } => {
                    if self.wants(*x) {
                        let (rows, cols) = probs.dims2();
                        let upstream = g.data()[0] / (rows as f64 * tau);
                        let mut dx = probs.clone();
                        let d = dx.data_mut();
                        for r in 0..rows {
                            let q = target.row(r);
                            let mass: f64 = q.iter().sum();
                            for j in 0..cols {
                                let v = &mut d[r * cols + j];
                                *v = (mass * *v - q[j]) * upstream;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, factor) => {
                    if self.wants(*x) {
                        accumulate(&mut grads, *x, g.map(|v| v * factor));
                    }
                }
                Op::Sum(x) => {
                    if self.wants(*x) {
                        let shape = self.value(*x).shape();
                        accumulate(&mut grads, *x, Tensor::filled(shape, g.data()[0]));
                    }
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients(out))
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// `max + ln(sum exp(x - max))`, with the max term split out so that the
/// remainder goes through `ln_1p`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let (imax, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Temperature softmax `exp(x_i/tau) / sum_j exp(x_j/tau)` applied to each
/// row (last dimension) of `x`, using max subtraction.
pub fn softmax_tau_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (rows, cols) = x.dims2();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
        let start = out.len();
        out.extend(row.iter().map(|v| (v / tau - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Tape`] records every op of a forward pass together with its output
//! value. [`Tape::backward`] replays the record in reverse from a 1×1
//! output and returns the gradient for every recorded value that depends
//! on a leaf created with `requires_grad`. Values registered with
//! [`Tape::checkpoint`] (the per-layer representations `H⁽⁰⁾..H⁽ᴸ⁾`) can
//! be read back by index from the [`Gradients`].
//!
//! The op set is closed: exactly what the GNN layers, their heads and the
//! training losses need. Every op checks its output for NaN/Inf and
//! reports the op name instead of silently propagating.
//!
//! A tape may be differentiated once; a second `backward` returns
//! [`Error::TapeConsumed`].

use std::sync::Arc;

use crate::counters;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::tensor::{dot, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target-major list of message slots for one forward pass: for target
/// `i`, slots `offsets[i]..offsets[i+1]` hold its neighbors in adjacency
/// order, followed by `i` itself when self-loops are on.
#[derive(Debug, Clone)]
pub struct AggPlan {
    offsets: Vec<usize>,
    sources: Vec<u32>,
    self_loops: bool,
}

impl AggPlan {
    pub fn build<T: Topology + ?Sized>(topo: &T, self_loops: bool) -> AggPlan {
        let n = topo.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for i in 0..n {
            sources.extend(topo.neighbors(i).map(|j| j as u32));
            if self_loops {
                sources.push(i as u32);
            }
            offsets.push(sources.len());
        }
        AggPlan {
            offsets,
            sources,
            self_loops,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_slots(&self) -> usize {
        self.sources.len()
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn segment(&self, target: usize) -> std::ops::Range<usize> {
        self.offsets[target]..self.offsets[target + 1]
    }

    pub fn source(&self, slot: usize) -> usize {
        self.sources[slot] as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowScale(Var, Var),
    Aggregate {
        plan: Arc<AggPlan>,
        h: Var,
        coeffs: Var,
    },
    EdgeScores {
        plan: Arc<AggPlan>,
        src: Var,
        dst: Var,
    },
    SegmentSoftmax {
        plan: Arc<AggPlan>,
        x: Var,
    },
    RowDot {
        a: Var,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    HalfSquaredNorm(Var),
    SliceCols(Var, usize),
    SelectRows(Var, Arc<Vec<usize>>),
    NllRows {
        logp: Var,
        rows: Arc<Vec<usize>>,
        labels: Arc<Vec<usize>>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<Vec<f64>>,
    },
    Mse {
        pred: Var,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checkpoints: Vec<Var>,
    consumed: bool,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    checkpoints: Vec<Var>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`; zeros
    /// when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradient for the `i`-th checkpoint in registration order.
    pub fn checkpoint(&self, i: usize) -> Tensor {
        self.wrt(self.checkpoints[i])
    }

    pub fn num_checkpoints(&self) -> usize {
        self.checkpoints.len()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf that shares storage with the caller (model weights are not
    /// copied per forward pass).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn checkpoint(&mut self, v: Var) {
        self.checkpoints.push(v);
    }

    pub fn checkpoints(&self) -> &[Var] {
        &self.checkpoints
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = x.zip_map(y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = x.zip_map(y, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// `a + 1·bias` with `bias` a 1×c row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = x.zip_map(y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| c * v);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `max(x, 0)`; the derivative at 0 is taken to be 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    /// Row-wise softmax with the row max subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Scales row `i` of `a` by `m[i]` (`m` is N×1).
    pub fn row_scale(&mut self, a: Var, m: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(m));
        if s.cols() != 1 || s.rows() != x.rows() {
            return Err(Error::Shape {
                op: "row_scale",
                lhs: x.shape(),
                rhs: s.shape(),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let f = s.data()[r];
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        self.push("row_scale", out, Op::RowScale(a, m), &[a, m])
    }

    /// `out[i] = Σ_{s ∈ segment(i)} coeffs[s] · h[source(s)]`.
    pub fn aggregate(&mut self, plan: &Arc<AggPlan>, h: Var, coeffs: Var) -> Result<Var> {
        let (hv, cv) = (self.value(h), self.value(coeffs));
        if hv.rows() != plan.num_nodes() {
            return Err(Error::Shape {
                op: "aggregate",
                lhs: hv.shape(),
                rhs: (plan.num_nodes(), hv.cols()),
            });
        }
        if cv.cols() != 1 || cv.rows() != plan.num_slots() {
            return Err(Error::Shape {
                op: "aggregate",
                lhs: cv.shape(),
                rhs: (plan.num_slots(), 1),
            });
        }
        let mut out = Tensor::zeros(hv.rows(), hv.cols());
        let c = cv.data();
        for i in 0..plan.num_nodes() {
            let row = out.row_mut(i);
            for s in plan.segment(i) {
                let w = c[s];
                for (o, &x) in row.iter_mut().zip(hv.row(plan.source(s))) {
                    *o += w * x;
                }
            }
        }
        let op = Op::Aggregate {
            plan: Arc::clone(plan),
            h,
            coeffs,
        };
        self.push("aggregate", out, op, &[h, coeffs])
    }

    /// Per-slot score `src[source(s)] + dst[target(s)]` from two N×1 columns.
    pub fn edge_scores(&mut self, plan: &Arc<AggPlan>, src: Var, dst: Var) -> Result<Var> {
        let (sv, dv) = (self.value(src), self.value(dst));
        let n = plan.num_nodes();
        for t in [sv, dv] {
            if t.shape() != (n, 1) {
                return Err(Error::Shape {
                    op: "edge_scores",
                    lhs: t.shape(),
                    rhs: (n, 1),
                });
            }
        }
        let mut out = Vec::with_capacity(plan.num_slots());
        for i in 0..n {
            for s in plan.segment(i) {
                out.push(sv.data()[plan.source(s)] + dv.data()[i]);
            }
        }
        let op = Op::EdgeScores {
            plan: Arc::clone(plan),
            src,
            dst,
        };
        self.push("edge_scores", Tensor::column(out), op, &[src, dst])
    }

    /// Softmax of a slot column within each target's segment.
    pub fn segment_softmax(&mut self, plan: &Arc<AggPlan>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != (plan.num_slots(), 1) {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: xv.shape(),
                rhs: (plan.num_slots(), 1),
            });
        }
        let mut out = xv.clone();
        let d = out.data_mut();
        for i in 0..plan.num_nodes() {
            let seg = &mut d[plan.segment(i)];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in seg.iter_mut() {
                *v /= total;
            }
        }
        let op = Op::SegmentSoftmax {
            plan: Arc::clone(plan),
            x,
        };
        self.push("segment_softmax", out, op, &[x])
    }

    /// `out[e] = a[i] · a[j]` for each `(i, j)` in `pairs`, as an E×1 column.
    pub fn row_dot(&mut self, a: Var, pairs: &Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            if i >= av.rows() || j >= av.rows() {
                return Err(Error::NodeOutOfRange {
                    node: i.max(j),
                    num_nodes: av.rows(),
                });
            }
            out.push(dot(av.row(i), av.row(j)));
        }
        let op = Op::RowDot {
            a,
            pairs: Arc::clone(pairs),
        };
        self.push("row_dot", Tensor::column(out), op, &[a])
    }

    /// N×1 column of row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::column((0..av.rows()).map(|r| av.row(r).iter().sum()).collect());
        self.push("row_sum", out, Op::RowSum(a), &[a])
    }

    /// 1×c row of column sums.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = column_sums(av);
        self.push("col_sum", out, Op::ColSum(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum_all", out, Op::SumAll(a), &[a])
    }

    /// `½ Σ x²` as a 1×1.
    pub fn half_squared_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        self.push("half_squared_norm", Tensor::scalar(0.5 * s), Op::HalfSquaredNorm(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: av.shape(),
                rhs: (start, end),
            });
        }
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: &Arc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::NodeOutOfRange {
                node: bad,
                num_nodes: av.rows(),
            });
        }
        let out = av.select_rows(rows);
        self.push("select_rows", out, Op::SelectRows(a, Arc::clone(rows)), &[a])
    }

    /// Mean negative log-likelihood of `labels[k]` at row `rows[k]` of a
    /// log-probability matrix.
    pub fn nll_rows(
        &mut self,
        logp: Var,
        rows: &Arc<Vec<usize>>,
        labels: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let lv = self.value(logp);
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::invalid("nll_rows needs equal, non-empty rows and labels"));
        }
        let mut total = 0.0;
        for (&r, &c) in rows.iter().zip(labels.iter()) {
            total -= lv.get(r, c);
        }
        let op = Op::NllRows {
            logp,
            rows: Arc::clone(rows),
            labels: Arc::clone(labels),
        };
        self.push("nll_rows", Tensor::scalar(total / rows.len() as f64), op, &[logp])
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Arc<Vec<f64>>) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: z.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits {
            logits,
            targets: Arc::clone(targets),
        };
        self.push("bce_with_logits", Tensor::scalar(total / targets.len() as f64), op, &[logits])
    }

    /// Mean squared error between column 0 of `pred` at `rows` and `targets`.
    pub fn mse(&mut self, pred: Var, rows: &Arc<Vec<usize>>, targets: &Arc<Vec<f64>>) -> Result<Var> {
        let pv = self.value(pred);
        if rows.len() != targets.len() || rows.is_empty() || pv.cols() != 1 {
            return Err(Error::invalid("mse needs an N×1 prediction and matching rows/targets"));
        }
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            let d = pv.data()[r] - t;
            total += d * d;
        }
        let op = Op::Mse {
            pred,
            rows: Arc::clone(rows),
            targets: Arc::clone(targets),
        };
        self.push("mse", Tensor::scalar(total / rows.len() as f64), op, &[pred])
    }

    /// Gradients of the 1×1 value `out` with respect to everything on the
    /// tape that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalar(shape.0, shape.1));
        }
        self.consumed = true;
        counters::record_backward();

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            checkpoints: self.checkpoints.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).matmul_tn(g)?);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |p, q| p * q));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |p, q| p * q));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], g.map(|v| c * v));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let (x, s) = (self.value(*a), *slope);
                accumulate(
                    &mut grads[a.0],
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { s * gv }),
                );
            }
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.zip_map(x, |gv, xv| gv * sign(xv)));
            }
            Op::SoftmaxRows(a) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((d, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::RowScale(a, m) => {
                let (x, s) = (self.value(*a), self.value(*m));
                if self.wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let f = s.data()[r];
                        for v in da.row_mut(r) {
                            *v *= f;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*m) {
                    let dm = (0..x.rows()).map(|r| dot(g.row(r), x.row(r))).collect();
                    accumulate(&mut grads[m.0], Tensor::column(dm));
                }
            }
            Op::Aggregate { plan, h, coeffs } => {
                let (hv, cv) = (self.value(*h), self.value(*coeffs));
                if self.wants(*h) {
                    let mut dh = Tensor::zeros(hv.rows(), hv.cols());
                    for i in 0..plan.num_nodes() {
                        let gr = g.row(i);
                        for s in plan.segment(i) {
                            let w = cv.data()[s];
                            for (d, &gv) in dh.row_mut(plan.source(s)).iter_mut().zip(gr) {
                                *d += w * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[h.0], dh);
                }
                if self.wants(*coeffs) {
                    let mut dc = vec![0.0; plan.num_slots()];
                    for i in 0..plan.num_nodes() {
                        for s in plan.segment(i) {
                            dc[s] = dot(hv.row(plan.source(s)), g.row(i));
                        }
                    }
                    accumulate(&mut grads[coeffs.0], Tensor::column(dc));
                }
            }
            Op::EdgeScores { plan, src, dst } => {
                let n = plan.num_nodes();
                let mut ds = vec![0.0; n];
                let mut dd = vec![0.0; n];
                for i in 0..n {
                    for s in plan.segment(i) {
                        ds[plan.source(s)] += g.data()[s];
                        dd[i] += g.data()[s];
                    }
                }
                if self.wants(*src) {
                    accumulate(&mut grads[src.0], Tensor::column(ds));
                }
                if self.wants(*dst) {
                    accumulate(&mut grads[dst.0], Tensor::column(dd));
                }
            }
            Op::SegmentSoftmax { plan, x } => {
                let mut dx = vec![0.0; plan.num_slots()];
                for i in 0..plan.num_nodes() {
                    let seg = plan.segment(i);
                    let inner: f64 = seg.clone().map(|s| g.data()[s] * y.data()[s]).sum();
                    for s in seg {
                        dx[s] = y.data()[s] * (g.data()[s] - inner);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::column(dx));
            }
            Op::RowDot { a, pairs } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (e, &(i, j)) in pairs.iter().enumerate() {
                    let ge = g.data()[e];
                    if ge == 0.0 {
                        continue;
                    }
                    let rj = av.row(j).to_vec();
                    let ri = av.row(i).to_vec();
                    for (d, v) in da.row_mut(i).iter_mut().zip(&rj) {
                        *d += ge * v;
                    }
                    for (d, v) in da.row_mut(j).iter_mut().zip(&ri) {
                        *d += ge * v;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    da.row_mut(r).fill(gv);
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::ColSum(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    da.row_mut(r).copy_from_slice(g.data());
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(&mut grads[a.0], Tensor::filled(r, c, g.data()[0]));
            }
            Op::HalfSquaredNorm(a) => {
                let gv = g.data()[0];
                accumulate(&mut grads[a.0], self.value(*a).map(|v| gv * v));
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gv) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::NllRows { logp, rows, labels } => {
                let lv = self.value(*logp);
                let mut d = Tensor::zeros(lv.rows(), lv.cols());
                let w = g.data()[0] / rows.len() as f64;
                for (&r, &c) in rows.iter().zip(labels.iter()) {
                    d.set(r, c, d.get(r, c) - w);
                }
                accumulate(&mut grads[logp.0], d);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let w = g.data()[0] / targets.len() as f64;
                let d = z
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&x, &t)| w * (sigmoid(x) - t))
                    .collect();
                accumulate(&mut grads[logits.0], Tensor::column(d));
            }
            Op::Mse {
                pred,
                rows,
                targets,
            } => {
                let pv = self.value(*pred);
                let w = 2.0 * g.data()[0] / rows.len() as f64;
                let mut d = vec![0.0; pv.rows()];
                for (&r, &t) in rows.iter().zip(targets.iter()) {
                    d[r] += w * (pv.data()[r] - t);
                }
                accumulate(&mut grads[pred.0], Tensor::column(d));
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn column_sums(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

//! Explicit computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from named inputs and constants, evaluated with
//! [`Graph::forward`], and differentiated with [`Graph::backward`], which
//! accumulates exact adjoints for every node reachable from a scalar output.
//! Nodes are appended in topological order, so reverse iteration over node
//! ids is reverse-topological.
//!
//! Comparison masks are treated as constants: they produce values in the
//! forward pass but stop adjoint propagation, and asking for the gradient of
//! a node whose only route to the output crosses a mask is an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor, NORM_GUARD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    /// x^p elementwise; requires x > 0 when p is negative or fractional.
    PowScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// log(1 + e^x), stable on both tails.
    Softplus(NodeId),
    ClampMin(NodeId, f64),
    RowSoftmax(NodeId),
    RowL2Normalize(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    SumAll(NodeId),
    SliceRows(NodeId, usize, usize),
    ConcatRows(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    /// 1.0 where x > threshold else 0.0. Non-differentiable; adjoints stop here.
    GtScalarMask(NodeId, f64),
    /// Column vector [m,1] to diagonal [m,m].
    DiagEmbed(NodeId),
    /// Scalar node times tensor node.
    ScalarMul(NodeId, NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    adjoints: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        self.values.push(None);
        self.adjoints.push(None);
        id
    }

    fn matrix_shape(&self, id: NodeId, context: &str) -> (usize, usize) {
        let s = self.shape_of(id);
        assert!(s.len() == 2, "{context}: node {} is not a matrix ({s:?})", id.0);
        (s[0], s[1])
    }

    // ── builders ─────────────────────────────────────────────────────

    /// Declare a named input with a fixed shape. Names must be unique.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        assert!(
            !self.inputs.contains_key(name),
            "duplicate graph input '{name}'"
        );
        let id = self.push(Op::Input(name.to_string()), shape);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Register a node under a name so callers can fetch it after `forward`.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.matrix_shape(a, "matmul lhs");
        let (k2, n) = self.matrix_shape(b, "matmul rhs");
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        self.push(Op::MatMul(a, b), vec![m, n])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.matrix_shape(a, "transpose");
        self.push(Op::Transpose(a), vec![n, m])
    }

    fn binary_same_shape(&mut self, op: fn(NodeId, NodeId) -> Op, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape_of(a),
            self.shape_of(b),
            "elementwise op shape mismatch"
        );
        let shape = self.shape_of(a).to_vec();
        self.push(op(a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Div, a, b)
    }

    fn unary(&mut self, op: Op, input: NodeId) -> NodeId {
        let shape = self.shape_of(input).to_vec();
        self.push(op, shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(a, c), a)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulScalar(a, c), a)
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(Op::PowScalar(a, p), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::ClampMin(a, c), a)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.matrix_shape(a, "row_softmax");
        self.unary(Op::RowSoftmax(a), a)
    }

    pub fn row_l2_normalize(&mut self, a: NodeId) -> NodeId {
        self.matrix_shape(a, "row_l2_normalize");
        self.unary(Op::RowL2Normalize(a), a)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.matrix_shape(a, "row_sum");
        self.push(Op::RowSum(a), vec![m, 1])
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let (_, n) = self.matrix_shape(a, "col_sum");
        self.push(Op::ColSum(a), vec![1, n])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![])
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let (_, n) = self.matrix_shape(a, "row_mean");
        let s = self.row_sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.matrix_shape(a, "col_mean");
        let s = self.col_sum(a);
        self.mul_scalar(s, 1.0 / m as f64)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let numel: usize = self.shape_of(a).iter().product();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / numel as f64)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.matrix_shape(a, "slice_rows");
        assert!(start + len <= m, "slice_rows out of range");
        self.push(Op::SliceRows(a, start, len), vec![len, n])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m1, n1) = self.matrix_shape(a, "concat_rows lhs");
        let (m2, n2) = self.matrix_shape(b, "concat_rows rhs");
        assert_eq!(n1, n2, "concat_rows col mismatch");
        self.push(Op::ConcatRows(a, b), vec![m1 + m2, n1])
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let (m, n) = self.matrix_shape(a, "gather_rows");
        assert!(indices.iter().all(|&i| i < m), "gather_rows index out of range");
        let k = indices.len();
        self.push(Op::GatherRows(a, indices), vec![k, n])
    }

    pub fn gather_cols(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let (m, n) = self.matrix_shape(a, "gather_cols");
        assert!(indices.iter().all(|&j| j < n), "gather_cols index out of range");
        let k = indices.len();
        self.push(Op::GatherCols(a, indices), vec![m, k])
    }

    pub fn gt_scalar_mask(&mut self, a: NodeId, threshold: f64) -> NodeId {
        self.unary(Op::GtScalarMask(a, threshold), a)
    }

    pub fn diag_embed(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.matrix_shape(a, "diag_embed");
        assert_eq!(n, 1, "diag_embed needs a column vector");
        self.push(Op::DiagEmbed(a), vec![m, m])
    }

    pub fn scalar_mul(&mut self, scalar: NodeId, tensor: NodeId) -> NodeId {
        assert!(
            self.shape_of(scalar).is_empty(),
            "scalar_mul first arg must be scalar"
        );
        let shape = self.shape_of(tensor).to_vec();
        self.push(Op::ScalarMul(scalar, tensor), shape)
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Evaluate every node. All declared inputs must be bound with tensors of
    /// the declared shapes.
    pub fn forward(&mut self, bindings: &[(&str, &Tensor)]) -> Result<()> {
        let mut bound: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in bindings {
            bound.insert(name, t);
        }
        for (name, id) in &self.inputs {
            let t = bound.remove(name.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("missing binding for input '{name}'"))
            })?;
            if t.shape() != self.shape_of(*id) {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "input '{name}' expects {:?}, got {:?}",
                        self.shape_of(*id),
                        t.shape()
                    ),
                ));
            }
            self.values[id.0] = Some(t.clone());
        }
        if let Some((name, _)) = bound.into_iter().next() {
            return Err(Error::InvalidArgument(format!(
                "binding '{name}' does not match any graph input"
            )));
        }

        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input(_)) {
                continue;
            }
            let value = self.eval_node(i)?;
            self.values[i] = Some(value);
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("node value missing; forward not run")
    }

    fn eval_node(&self, i: usize) -> Result<Tensor> {
        let out = match &self.nodes[i].op {
            Op::Input(_) => unreachable!(),
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b)),
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Add(a, b) => self.val(*a).add(self.val(*b)),
            Op::Sub(a, b) => self.val(*a).sub(self.val(*b)),
            Op::Mul(a, b) => self.val(*a).mul(self.val(*b)),
            Op::Div(a, b) => {
                let denom = self.val(*b);
                if denom.data().contains(&0.0) {
                    return Err(Error::Numeric(format!("division by zero at node {i}")));
                }
                self.val(*a).zip(denom, |x, y| x / y)
            }
            Op::AddScalar(a, c) => self.val(*a).map(|v| v + c),
            Op::MulScalar(a, c) => self.val(*a).map(|v| v * c),
            Op::PowScalar(a, p) => {
                let x = self.val(*a);
                let needs_positive = *p < 0.0 || p.fract() != 0.0;
                if needs_positive && x.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Numeric(format!(
                        "pow_scalar(p={p}) requires positive input at node {i}"
                    )));
                }
                x.map(|v| v.powf(*p))
            }
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Ln(a) => {
                let x = self.val(*a);
                if x.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Numeric(format!(
                        "ln of non-positive value at node {i}"
                    )));
                }
                x.map(f64::ln)
            }
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::ClampMin(a, c) => self.val(*a).map(|v| v.max(*c)),
            Op::RowSoftmax(a) => self.val(*a).row_softmax(),
            Op::RowL2Normalize(a) => self.val(*a).row_l2_normalize(),
            Op::RowSum(a) => self.val(*a).row_sum(),
            Op::ColSum(a) => self.val(*a).col_sum(),
            Op::SumAll(a) => Tensor::scalar(self.val(*a).sum()),
            Op::SliceRows(a, start, len) => self.val(*a).slice_rows(*start, *len),
            Op::ConcatRows(a, b) => self.val(*a).concat_rows(self.val(*b)),
            Op::GatherRows(a, idx) => self.val(*a).gather_rows(idx),
            Op::GatherCols(a, idx) => self.val(*a).gather_cols(idx),
            Op::GtScalarMask(a, thr) => self.val(*a).map(|v| if v > *thr { 1.0 } else { 0.0 }),
            Op::DiagEmbed(a) => self.val(*a).diag_embed(),
            Op::ScalarMul(s, t) => {
                let c = self.val(*s).scalar_value();
                self.val(*t).scale(c)
            }
        };
        Ok(out)
    }

    /// Fetch the evaluated value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.val(id)
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| self.val(*id))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Adjoints accumulate
    /// additively over fan-out; comparison masks stop propagation.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if !self.shape_of(out).is_empty() {
            return Err(Error::InvalidArgument(format!(
                "backward output must be scalar, got shape {:?}",
                self.shape_of(out)
            )));
        }
        if self.values[out.0].is_none() {
            return Err(Error::InvalidArgument(
                "backward called before forward".to_string(),
            ));
        }
        for a in self.adjoints.iter_mut() {
            *a = None;
        }
        self.adjoints[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let adj = match self.adjoints[i].take() {
                Some(a) => a,
                None => continue,
            };
            self.propagate(i, &adj);
            self.adjoints[i] = Some(adj);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        match &mut self.adjoints[id.0] {
            Some(existing) => *existing = existing.add(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, adj: &Tensor) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Input(_) | Op::Constant(_) | Op::GtScalarMask(_, _) => {}
            Op::MatMul(a, b) => {
                let ga = adj.matmul(&self.val(b).transpose());
                let gb = self.val(a).transpose().matmul(adj);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Transpose(a) => {
                self.accumulate(a, adj.transpose());
            }
            Op::Add(a, b) => {
                self.accumulate(a, adj.clone());
                self.accumulate(b, adj.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, adj.clone());
                self.accumulate(b, adj.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = adj.mul(self.val(b));
                let gb = adj.mul(self.val(a));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.val(b);
                let out = self.val(NodeId(i));
                let ga = adj.zip(bv, |g, y| g / y);
                let gb = adj.zip(&out.zip(bv, |c, y| c / y), |g, cy| -g * cy);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a, _) => self.accumulate(a, adj.clone()),
            Op::MulScalar(a, c) => self.accumulate(a, adj.scale(c)),
            Op::PowScalar(a, p) => {
                let x = self.val(a);
                let g = adj.zip(x, |g, v| g * p * v.powf(p - 1.0));
                self.accumulate(a, g);
            }
            Op::Exp(a) => {
                let out = self.val(NodeId(i)).clone();
                self.accumulate(a, adj.mul(&out));
            }
            Op::Ln(a) => {
                let x = self.val(a);
                self.accumulate(a, adj.zip(x, |g, v| g / v));
            }
            Op::Sigmoid(a) => {
                let out = self.val(NodeId(i));
                let g = adj.zip(out, |g, s| g * s * (1.0 - s));
                self.accumulate(a, g);
            }
            Op::Tanh(a) => {
                let out = self.val(NodeId(i));
                let g = adj.zip(out, |g, t| g * (1.0 - t * t));
                self.accumulate(a, g);
            }
            Op::Softplus(a) => {
                let x = self.val(a);
                self.accumulate(a, adj.zip(x, |g, v| g * sigmoid(v)));
            }
            Op::ClampMin(a, c) => {
                let x = self.val(a);
                self.accumulate(a, adj.zip(x, |g, v| if v >= c { g } else { 0.0 }));
            }
            Op::RowSoftmax(a) => {
                let p = self.val(NodeId(i));
                let (m, n) = (p.rows(), p.cols());
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let prow = p.row(r);
                    let arow = adj.row(r);
                    let dot: f64 = prow.iter().zip(arow).map(|(&pv, &av)| pv * av).sum();
                    for c in 0..n {
                        g.set(r, c, prow[c] * (arow[c] - dot));
                    }
                }
                self.accumulate(a, g);
            }
            Op::RowL2Normalize(a) => {
                let x = self.val(a);
                let y = self.val(NodeId(i));
                let (m, n) = (x.rows(), x.cols());
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let xrow = x.row(r);
                    let raw_norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let norm = raw_norm.max(NORM_GUARD);
                    let yrow = y.row(r);
                    let arow = adj.row(r);
                    if raw_norm >= NORM_GUARD {
                        let dot: f64 = yrow.iter().zip(arow).map(|(&yv, &av)| yv * av).sum();
                        for (c, (&av, &yv)) in arow.iter().zip(yrow).enumerate() {
                            g.set(r, c, (av - dot * yv) / norm);
                        }
                    } else {
                        // Clamped branch: y = x / NORM_GUARD exactly.
                        for (c, &av) in arow.iter().enumerate() {
                            g.set(r, c, av / norm);
                        }
                    }
                }
                self.accumulate(a, g);
            }
            Op::RowSum(a) => {
                let (m, n) = {
                    let s = self.shape_of(a);
                    (s[0], s[1])
                };
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let v = adj.data()[r];
                    for c in 0..n {
                        g.set(r, c, v);
                    }
                }
                self.accumulate(a, g);
            }
            Op::ColSum(a) => {
                let (m, n) = {
                    let s = self.shape_of(a);
                    (s[0], s[1])
                };
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        g.set(r, c, adj.data()[c]);
                    }
                }
                self.accumulate(a, g);
            }
            Op::SumAll(a) => {
                let v = adj.scalar_value();
                let shape = self.shape_of(a).to_vec();
                let numel: usize = shape.iter().product();
                let g = Tensor::new(shape, vec![v; numel]).expect("sum_all adjoint");
                self.accumulate(a, g);
            }
            Op::SliceRows(a, start, len) => {
                let (m, n) = {
                    let s = self.shape_of(a);
                    (s[0], s[1])
                };
                let mut g = Tensor::zeros(m, n);
                for r in 0..len {
                    for c in 0..n {
                        g.set(start + r, c, adj.at(r, c));
                    }
                }
                self.accumulate(a, g);
            }
            Op::ConcatRows(a, b) => {
                let ma = self.shape_of(a)[0];
                let mb = self.shape_of(b)[0];
                self.accumulate(a, adj.slice_rows(0, ma));
                self.accumulate(b, adj.slice_rows(ma, mb));
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = {
                    let s = self.shape_of(a);
                    (s[0], s[1])
                };
                let mut g = Tensor::zeros(m, n);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..n {
                        let v = g.at(src, c) + adj.at(r, c);
                        g.set(src, c, v);
                    }
                }
                self.accumulate(a, g);
            }
            Op::GatherCols(a, idx) => {
                let (m, n) = {
                    let s = self.shape_of(a);
                    (s[0], s[1])
                };
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    for (c, &src) in idx.iter().enumerate() {
                        let v = g.at(r, src) + adj.at(r, c);
                        g.set(r, src, v);
                    }
                }
                self.accumulate(a, g);
            }
            Op::DiagEmbed(a) => {
                let m = self.shape_of(a)[0];
                let mut g = Tensor::zeros(m, 1);
                for r in 0..m {
                    g.set(r, 0, adj.at(r, r));
                }
                self.accumulate(a, g);
            }
            Op::ScalarMul(s, t) => {
                let sv = self.val(s).scalar_value();
                let tv = self.val(t);
                let gs = Tensor::scalar(adj.mul(tv).sum());
                self.accumulate(s, gs);
                self.accumulate(t, adj.scale(sv));
            }
        }
    }

    /// Accumulated adjoint of a node (zeros if no differentiable path
    /// reached it during the last backward sweep).
    pub fn adjoint(&self, id: NodeId) -> Tensor {
        match &self.adjoints[id.0] {
            Some(a) => a.clone(),
            None => {
                let shape = self.shape_of(id).to_vec();
                let numel: usize = shape.iter().product();
                Tensor::new(shape, vec![0.0; numel]).expect("zero adjoint")
            }
        }
    }

    /// Gradients of a scalar output w.r.t. designated inputs, in one sweep.
    /// Errors if a target has no differentiable path to the output.
    pub fn gradients(&mut self, out: NodeId, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        let reachable = self.differentiable_set(out);
        for t in targets {
            if !reachable[t.0] {
                return Err(Error::NonDifferentiable { node: t.0 });
            }
        }
        self.backward(out)?;
        Ok(targets.iter().map(|t| self.adjoint(*t)).collect())
    }

    /// Nodes with a differentiable path to `out` (mask edges excluded).
    fn differentiable_set(&self, out: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![out.0];
        seen[out.0] = true;
        while let Some(i) = stack.pop() {
            let mut visit = |id: NodeId| {
                if !seen[id.0] {
                    seen[id.0] = true;
                    stack.push(id.0);
                }
            };
            match &self.nodes[i].op {
                Op::Input(_) | Op::Constant(_) | Op::GtScalarMask(_, _) => {}
                Op::MatMul(a, b)
                | Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::Div(a, b)
                | Op::ConcatRows(a, b)
                | Op::ScalarMul(a, b) => {
                    visit(*a);
                    visit(*b);
                }
                Op::Transpose(a)
                | Op::AddScalar(a, _)
                | Op::MulScalar(a, _)
                | Op::PowScalar(a, _)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Sigmoid(a)
                | Op::Tanh(a)
                | Op::Softplus(a)
                | Op::ClampMin(a, _)
                | Op::RowSoftmax(a)
                | Op::RowL2Normalize(a)
                | Op::RowSum(a)
                | Op::ColSum(a)
                | Op::SumAll(a)
                | Op::SliceRows(a, _, _)
                | Op::GatherRows(a, _)
                | Op::GatherCols(a, _)
                | Op::DiagEmbed(a) => visit(*a),
            }
        }
        seen
    }
}

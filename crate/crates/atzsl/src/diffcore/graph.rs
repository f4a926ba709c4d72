//! Computation record with reverse-mode differentiation.
//!
//! Operations append nodes to a [`Graph`] and compute their results eagerly.
//! [`Graph::backward`] replays the record in exact reverse insertion order and
//! accumulates the adjoint of every node, including input leaves, so the same
//! machinery serves parameter training, input-space attacks, and
//! prototype-space attacks.
//!
//! Lifetime model: one graph per forward/backward pair. Graphs are never
//! reused across optimization steps. A graph is single-threaded; tensors it
//! returns are immutable values and may be shared freely.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`]. Ids are only meaningful for the
/// graph that issued them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    Relu,
    Concat,
    Sum,
    Mean,
    RowLogSumExp,
    SelectPerRow(Vec<usize>),
    RepeatRows(usize),
    TileRows(usize),
    Reshape,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients of one scalar loss with respect to every node of a graph.
///
/// Every gradient tensor has the same shape as its node's output.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Tensor>,
}

impl GradientMap {
    /// d(loss)/d(node).
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

/// Ordered record of operations; insertion order is the topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Matrix product of two rank-2 tensors, `[m×k] × [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::checked(vec![m, n], out, "matmul")?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    fn elementwise(
        &self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::checked(ta.shape().to_vec(), data, op)
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| c * x).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "scale")?;
        Ok(self.push(Op::Scale(c), vec![a], value))
    }

    /// Add a rank-1 bias `[n]` to every row of a rank-2 tensor `[m×n]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let value = Tensor::checked(sa, data, "add_bias")?;
        Ok(self.push(Op::AddBias, vec![a, bias], value))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "relu")?;
        Ok(self.push(Op::Relu, vec![a], value))
    }

    /// Concatenate two rank-1 tensors end to end, or two rank-2 tensors with
    /// equal row counts along the feature axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let value = match (sa.as_slice(), sb.as_slice()) {
            ([d1], [d2]) => {
                let mut data = Vec::with_capacity(d1 + d2);
                data.extend_from_slice(ta.data());
                data.extend_from_slice(tb.data());
                Tensor::checked(vec![d1 + d2], data, "concat")?
            }
            ([m1, d1], [m2, d2]) if m1 == m2 => {
                let mut data = Vec::with_capacity(m1 * (d1 + d2));
                for i in 0..*m1 {
                    data.extend_from_slice(ta.row(i));
                    data.extend_from_slice(tb.row(i));
                }
                Tensor::checked(vec![*m1, d1 + d2], data, "concat")?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        Ok(self.push(Op::Concat, vec![a, b], value))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let value = Tensor::checked(vec![1], vec![s], "sum")?;
        Ok(self.push(Op::Sum, vec![a], value))
    }

    /// Mean of all entries, shape `[1]`. Errors on empty input.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: f64 = ta.data().iter().sum();
        let value = Tensor::checked(vec![1], vec![s / ta.len() as f64], "mean")?;
        Ok(self.push(Op::Mean, vec![a], value))
    }

    /// Row-wise `log Σ exp`, `[m×n] -> [m]`, computed with max-subtraction so
    /// large scores cannot overflow.
    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[1] == 0 {
            return Err(Error::invalid(format!(
                "row_logsumexp requires a rank-2 tensor with nonempty rows, got {:?}",
                ta.shape()
            )));
        }
        let m = ta.shape()[0];
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = ta.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out.push(max + s.ln());
        }
        let value = Tensor::checked(vec![m], out, "row_logsumexp")?;
        Ok(self.push(Op::RowLogSumExp, vec![a], value))
    }

    /// Pick one entry per row, `[m×n] -> [m]` with `out[i] = a[i, idx[i]]`.
    pub fn select_per_row(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || idx.len() != ta.shape()[0] {
            return Err(Error::invalid(format!(
                "select_per_row: {} indices for tensor of shape {:?}",
                idx.len(),
                ta.shape()
            )));
        }
        let n = ta.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::invalid(format!(
                    "select_per_row: index {j} out of range for {n} columns"
                )));
            }
            out.push(ta.at2(i, j));
        }
        let value = Tensor::checked(vec![idx.len()], out, "select_per_row")?;
        Ok(self.push(Op::SelectPerRow(idx), vec![a], value))
    }

    /// Repeat each row `k` consecutive times, `[m×n] -> [m·k×n]`.
    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::invalid("repeat_rows requires a rank-2 tensor"));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(m * k * n);
        for i in 0..m {
            for _ in 0..k {
                data.extend_from_slice(ta.row(i));
            }
        }
        let value = Tensor::checked(vec![m * k, n], data, "repeat_rows")?;
        Ok(self.push(Op::RepeatRows(k), vec![a], value))
    }

    /// Stack `k` copies of the whole matrix, `[m×n] -> [k·m×n]`.
    pub fn tile_rows(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::invalid("tile_rows requires a rank-2 tensor"));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(k * m * n);
        for _ in 0..k {
            data.extend_from_slice(ta.data());
        }
        let value = Tensor::checked(vec![k * m, n], data, "tile_rows")?;
        Ok(self.push(Op::TileRows(k), vec![a], value))
    }

    /// Reinterpret the entries under a new shape of equal total size.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::checked(shape, ta.data().to_vec(), "reshape")?;
        Ok(self.push(Op::Reshape, vec![a], value))
    }

    /// Smallest |x| over the inputs of all ReLU nodes, if any. Finite-difference
    /// checks use this to detect evaluations near a kink, where the one-sided
    /// derivative convention (gradient 0 at exactly 0) makes central
    /// differences unreliable.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if matches!(node.op, Op::Relu) {
                let input = &self.nodes[node.inputs[0].0].value;
                for &v in input.data() {
                    min = Some(min.map_or(v.abs(), |m: f64| m.min(v.abs())));
                }
            }
        }
        min
    }

    /// Activation sign pattern (input > 0) of every ReLU node, in insertion
    /// order. Two evaluations whose patterns differ straddle at least one kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if matches!(node.op, Op::Relu) {
                let input = &self.nodes[node.inputs[0].0].value;
                pattern.extend(input.data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Reverse-mode sweep from a scalar-shaped loss node. Returns d(loss)/d(node)
    /// for every node of the graph.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar-shaped loss node, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let upstream = std::mem::replace(&mut grads[id], Tensor::zeros(vec![0]));
            self.accumulate(node, &upstream, &mut grads);
            grads[id] = upstream;
        }
        Ok(GradientMap { grads })
    }

    fn accumulate(&self, node: &Node, upstream: &Tensor, grads: &mut [Tensor]) {
        let u = upstream.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let a = &self.nodes[node.inputs[0].0].value;
                let b = &self.nodes[node.inputs[1].0].value;
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = dC · Bᵀ
                {
                    let da = grads[node.inputs[0].index()].data_mut();
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &b.data()[kk * n..(kk + 1) * n];
                            let urow = &u[i * n..(i + 1) * n];
                            let mut acc = 0.0;
                            for (uv, bv) in urow.iter().zip(brow) {
                                acc += uv * bv;
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                // dB = Aᵀ · dC
                {
                    let db = grads[node.inputs[1].index()].data_mut();
                    for i in 0..m {
                        let arow = &a.data()[i * k..(i + 1) * k];
                        let urow = &u[i * n..(i + 1) * n];
                        for (kk, &av) in arow.iter().enumerate() {
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (dv, &uv) in dbrow.iter_mut().zip(urow) {
                                *dv += av * uv;
                            }
                        }
                    }
                }
            }
            Op::Add => {
                for input in &node.inputs {
                    let g = grads[input.index()].data_mut();
                    for (gv, &uv) in g.iter_mut().zip(u) {
                        *gv += uv;
                    }
                }
            }
            Op::Sub => {
                let ga = grads[node.inputs[0].index()].data_mut();
                for (gv, &uv) in ga.iter_mut().zip(u) {
                    *gv += uv;
                }
                let gb = grads[node.inputs[1].index()].data_mut();
                for (gv, &uv) in gb.iter_mut().zip(u) {
                    *gv -= uv;
                }
            }
            Op::Mul => {
                let a = self.nodes[node.inputs[0].0].value.data().to_vec();
                let b = self.nodes[node.inputs[1].0].value.data().to_vec();
                let ga = grads[node.inputs[0].index()].data_mut();
                for ((gv, &uv), &bv) in ga.iter_mut().zip(u).zip(&b) {
                    *gv += uv * bv;
                }
                let gb = grads[node.inputs[1].index()].data_mut();
                for ((gv, &uv), &av) in gb.iter_mut().zip(u).zip(&a) {
                    *gv += uv * av;
                }
            }
            Op::Scale(c) => {
                let g = grads[node.inputs[0].index()].data_mut();
                for (gv, &uv) in g.iter_mut().zip(u) {
                    *gv += c * uv;
                }
            }
            Op::AddBias => {
                let n = self.nodes[node.inputs[1].0].value.len();
                let ga = grads[node.inputs[0].index()].data_mut();
                for (gv, &uv) in ga.iter_mut().zip(u) {
                    *gv += uv;
                }
                let gb = grads[node.inputs[1].index()].data_mut();
                for (i, &uv) in u.iter().enumerate() {
                    gb[i % n] += uv;
                }
            }
            Op::Relu => {
                let a = &self.nodes[node.inputs[0].0].value;
                let mask: Vec<bool> = a.data().iter().map(|&v| v > 0.0).collect();
                let g = grads[node.inputs[0].index()].data_mut();
                for ((gv, &uv), &on) in g.iter_mut().zip(u).zip(&mask) {
                    if on {
                        *gv += uv;
                    }
                }
            }
            Op::Concat => {
                let a = &self.nodes[node.inputs[0].0].value;
                let b = &self.nodes[node.inputs[1].0].value;
                if a.rank() == 1 {
                    let d1 = a.len();
                    let ga = grads[node.inputs[0].index()].data_mut();
                    for (gv, &uv) in ga.iter_mut().zip(&u[..d1]) {
                        *gv += uv;
                    }
                    let gb = grads[node.inputs[1].index()].data_mut();
                    for (gv, &uv) in gb.iter_mut().zip(&u[d1..]) {
                        *gv += uv;
                    }
                } else {
                    let (m, d1, d2) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                    let w = d1 + d2;
                    {
                        let ga = grads[node.inputs[0].index()].data_mut();
                        for i in 0..m {
                            let urow = &u[i * w..i * w + d1];
                            for (gv, &uv) in ga[i * d1..(i + 1) * d1].iter_mut().zip(urow) {
                                *gv += uv;
                            }
                        }
                    }
                    let gb = grads[node.inputs[1].index()].data_mut();
                    for i in 0..m {
                        let urow = &u[i * w + d1..(i + 1) * w];
                        for (gv, &uv) in gb[i * d2..(i + 1) * d2].iter_mut().zip(urow) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::Sum => {
                let g = grads[node.inputs[0].index()].data_mut();
                for gv in g.iter_mut() {
                    *gv += u[0];
                }
            }
            Op::Mean => {
                let len = self.nodes[node.inputs[0].0].value.len() as f64;
                let g = grads[node.inputs[0].index()].data_mut();
                for gv in g.iter_mut() {
                    *gv += u[0] / len;
                }
            }
            Op::RowLogSumExp => {
                let a = &self.nodes[node.inputs[0].0].value;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let out = node.value.data();
                let g = grads[node.inputs[0].index()].data_mut();
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += u[i] * (a.at2(i, j) - out[i]).exp();
                    }
                }
            }
            Op::SelectPerRow(idx) => {
                let n = self.nodes[node.inputs[0].0].value.shape()[1];
                let g = grads[node.inputs[0].index()].data_mut();
                for (i, &j) in idx.iter().enumerate() {
                    g[i * n + j] += u[i];
                }
            }
            Op::RepeatRows(k) => {
                let a = &self.nodes[node.inputs[0].0].value;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let g = grads[node.inputs[0].index()].data_mut();
                for i in 0..m {
                    for t in 0..*k {
                        let urow = &u[(i * k + t) * n..(i * k + t + 1) * n];
                        for (gv, &uv) in g[i * n..(i + 1) * n].iter_mut().zip(urow) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::TileRows(k) => {
                let a = &self.nodes[node.inputs[0].0].value;
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let g = grads[node.inputs[0].index()].data_mut();
                for t in 0..*k {
                    for i in 0..m {
                        let urow = &u[(t * m + i) * n..(t * m + i + 1) * n];
                        for (gv, &uv) in g[i * n..(i + 1) * n].iter_mut().zip(urow) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::Reshape => {
                let g = grads[node.inputs[0].index()].data_mut();
                for (gv, &uv) in g.iter_mut().zip(u) {
                    *gv += uv;
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

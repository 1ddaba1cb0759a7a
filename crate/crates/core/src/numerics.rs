//! Dense 2-D tensors and a reverse-mode differentiation graph.
//!
//! Every op appends a node to a [`Graph`]; node inputs always have smaller
//! indices than the node itself, so a reverse sweep over the node list is a
//! valid topological order for the backward pass. Gradients reaching the
//! same node along several paths are summed.
//!
//! ```
//! use tskip::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.hadamard(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().get(0, 0), 6.0);
//! ```

use std::fmt;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A `1 x n` tensor.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Builds a tensor from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Copies row `r` out as a `1 x cols` tensor.
    pub fn row_tensor(&self, r: usize) -> Tensor {
        Tensor::row_vector(self.row(r).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same(other, op)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm_nn(&mut out, self, other);
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        gemm_nt(&mut out, self, other);
        Ok(out)
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor {
        assert!(start + width <= self.cols, "slice_cols out of range");
        Tensor::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    /// Stacks equally wide tensors on top of each other.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("stack_rows"))?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Columnwise mean or max over rows. Max ties go to the lowest row.
    pub fn pool_rows(&self, mode: Pool) -> Result<Tensor> {
        Ok(pool_forward(self, mode)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Max,
}

/// Pointwise op selector for [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Abs,
    Hadamard,
    Add,
    Sub,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies a pointwise op on plain tensors. Binary ops need `b`.
pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    fn need(b: Option<&Tensor>) -> Result<&Tensor> {
        b.ok_or(Error::Empty("elementwise: missing second operand"))
    }
    match op {
        Elementwise::Sigmoid => Ok(a.map(sigmoid)),
        Elementwise::Tanh => Ok(a.map(f64::tanh)),
        Elementwise::Abs => Ok(a.map(f64::abs)),
        Elementwise::Hadamard => a.hadamard(need(b)?),
        Elementwise::Add => a.add(need(b)?),
        Elementwise::Sub => a.sub(need(b)?),
    }
}

/// `-log softmax(logits)[target]` for a `1 x V` row, max-subtracted.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.rows != 1 || logits.cols == 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (1, target + 1),
        });
    }
    if target >= logits.cols {
        return Err(Error::IdOutOfRange {
            id: target,
            size: logits.cols,
        });
    }
    let max = logits
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.data.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let loss = total.ln() - (logits.data[target] - max);
    Ok((loss, probs))
}

// out += a · b
fn gemm_nn(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bv;
            }
        }
    }
}

// out += a · bᵀ
fn gemm_nt(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let n = b.rows;
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..n {
            let dot: f64 = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.data[i * n + j] += dot;
        }
    }
}

// out += aᵀ · b
fn gemm_tn(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let n = b.cols;
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

fn pool_forward(t: &Tensor, mode: Pool) -> Result<(Tensor, Vec<usize>)> {
    if t.rows == 0 {
        return Err(Error::Empty("pool_rows"));
    }
    match mode {
        Pool::Mean => {
            let mut out = vec![0.0; t.cols];
            for r in 0..t.rows {
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let n = t.rows as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Ok((Tensor::row_vector(out), Vec::new()))
        }
        Pool::Max => {
            let mut out = t.row(0).to_vec();
            let mut arg = vec![0; t.cols];
            for r in 1..t.rows {
                for (c, &v) in t.row(r).iter().enumerate() {
                    if v > out[c] {
                        out[c] = v;
                        arg[c] = r;
                    }
                }
            }
            Ok((Tensor::row_vector(out), arg))
        }
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    OneMinus(NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    StackRows(Vec<NodeId>),
    PoolMean(NodeId),
    PoolMax(NodeId, Vec<usize>),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxXent(NodeId, usize, Vec<f64>),
    SumAll(NodeId),
    AddScalars(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation. Build it forward with the op methods, then call
/// [`Graph::backward`] on a `1 x 1` node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like `like` when unreached.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Graph {
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

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; lets weights stored as `out x in` act on row vectors.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// Dispatches an [`Elementwise`] op onto the graph.
    pub fn elementwise(&mut self, op: Elementwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let need = |b: Option<NodeId>| b.ok_or(Error::Empty("elementwise: missing second operand"));
        match op {
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
            Elementwise::Abs => Ok(self.abs(a)),
            Elementwise::Hadamard => self.hadamard(a, need(b)?),
            Elementwise::Add => self.add(a, need(b)?),
            Elementwise::Sub => self.sub(a, need(b)?),
        }
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start + width > src.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: src.shape(),
                right: (src.rows, start + width),
            });
        }
        let v = src.slice_cols(start, width);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack_rows(&refs)?;
        Ok(self.push(v, Op::StackRows(parts.to_vec())))
    }

    pub fn pool_rows(&mut self, mode: Pool, a: NodeId) -> Result<NodeId> {
        let (v, arg) = pool_forward(self.value(a), mode)?;
        let op = match mode {
            Pool::Mean => Op::PoolMean(a),
            Pool::Max => Op::PoolMax(a, arg),
        };
        Ok(self.push(v, op))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &id in ids {
            if id >= t.rows {
                return Err(Error::IdOutOfRange { id, size: t.rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor {
            rows: ids.len(),
            cols: t.cols,
            data,
        };
        Ok(self.push(v, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent(logits, target, probs)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Sums `1 x 1` nodes.
    pub fn add_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(mismatch("add_scalars", v, &Tensor::scalar(0.0)));
            }
            total += v.data[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::AddScalars(parts.to_vec())))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(mismatch("backward", lv, &Tensor::scalar(0.0)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        macro_rules! slot {
            ($id:expr) => {{
                let id: NodeId = $id;
                let (r, c) = self.nodes[id.0].value.shape();
                grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                gemm_nt(slot!(*a), g, val(*b));
                gemm_tn(slot!(*b), val(*a), g);
            }
            Op::MatMulT(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                gemm_nn(slot!(*a), g, val(*b));
                gemm_tn(slot!(*b), g, val(*a));
            }
            Op::Add(a, b) => {
                accumulate(slot!(*a), g, |x| x);
                accumulate(slot!(*b), g, |x| x);
            }
            Op::Sub(a, b) => {
                accumulate(slot!(*a), g, |x| x);
                accumulate(slot!(*b), g, |x| -x);
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (val(*a).clone(), val(*b).clone());
                accumulate_zip(slot!(*a), g, &vb, |gv, bv| gv * bv);
                accumulate_zip(slot!(*b), g, &va, |gv, av| gv * av);
            }
            Op::Sigmoid(a) => {
                accumulate_zip(slot!(*a), g, &node.value, |gv, s| gv * s * (1.0 - s));
            }
            Op::Tanh(a) => {
                accumulate_zip(slot!(*a), g, &node.value, |gv, t| gv * (1.0 - t * t));
            }
            Op::Abs(a) => {
                let va = val(*a);
                accumulate_zip(slot!(*a), g, va, |gv, x| {
                    gv * x.signum() * (x != 0.0) as u8 as f64
                });
            }
            Op::OneMinus(a) => accumulate(slot!(*a), g, |x| -x),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(slot!(*a), g, |x| x * k);
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols;
                let sa = slot!(*a);
                for r in 0..g.rows {
                    for (o, v) in sa.row_mut(r).iter_mut().zip(&g.row(r)[..p]) {
                        *o += v;
                    }
                }
                let sb = slot!(*b);
                for r in 0..g.rows {
                    for (o, v) in sb.row_mut(r).iter_mut().zip(&g.row(r)[p..]) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let sa = slot!(*a);
                for r in 0..g.rows {
                    for (o, v) in sa.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows;
                    let sp = slot!(p);
                    for (o, v) in sp
                        .data
                        .iter_mut()
                        .zip(&g.data[offset * g.cols..(offset + rows) * g.cols])
                    {
                        *o += v;
                    }
                    offset += rows;
                }
            }
            Op::PoolMean(a) => {
                let n = val(*a).rows as f64;
                let sa = slot!(*a);
                for r in 0..sa.rows {
                    for (o, v) in sa.row_mut(r).iter_mut().zip(&g.data) {
                        *o += v / n;
                    }
                }
            }
            Op::PoolMax(a, arg) => {
                let sa = slot!(*a);
                for (c, &r) in arg.iter().enumerate() {
                    let cols = sa.cols;
                    sa.data[r * cols + c] += g.data[c];
                }
            }
            Op::GatherRows(table, ids) => {
                let st = slot!(*table);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in st.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::SoftmaxXent(logits, target, probs) => {
                let gs = g.data[0];
                let sl = slot!(*logits);
                for (j, (o, p)) in sl.data.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *o += gs * (p - onehot);
                }
            }
            Op::SumAll(a) => {
                let gs = g.data[0];
                slot!(*a).data.iter_mut().for_each(|o| *o += gs);
            }
            Op::AddScalars(parts) => {
                for &p in parts {
                    slot!(p).data[0] += g.data[0];
                }
            }
        }
    }
}

fn accumulate(dst: &mut Tensor, g: &Tensor, f: impl Fn(f64) -> f64) {
    for (o, &v) in dst.data.iter_mut().zip(&g.data) {
        *o += f(v);
    }
}

fn accumulate_zip(dst: &mut Tensor, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((o, &gv), &ov) in dst.data.iter_mut().zip(&g.data).zip(&other.data) {
        *o += f(gv, ov);
    }
}

/// Compares backward-pass gradients of a scalar function against central
/// differences `(f(θ+εe) − f(θ−εe)) / 2ε`, entry by entry over every tensor
/// in `params`.
///
/// `f` receives a fresh graph and the leaf ids of `params` (in order) and
/// returns the `1 x 1` output node. Returns the maximum over entries of
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).get(0, 0))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let orig = work[pi].data[k];
            work[pi].data[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient_check: f not finite when perturbing param {pi} entry {k}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.data[k];
            let denom = an.abs().max(numeric.abs()).max(1e-8);
            let rel = (an - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let b = Tensor::from_rows(&[[5.0], [6.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let err = a.matmul(&Tensor::zeros(3, 1)).unwrap_err();
        assert!(err.to_string().contains("(2, 2)") && err.to_string().contains("(3, 1)"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let w = random(&mut rng, 3, 2);
        let err = gradient_check(
            |g, p| {
                let c = g.matmul(p[0], p[1])?;
                let wl = g.leaf(w.clone());
                let cw = g.hadamard(c, wl)?;
                Ok(g.sum_all(cw))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_t_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 4, 3);
        let err = gradient_check(
            |g, p| {
                let c = g.matmul_t(p[0], p[1])?;
                let t = g.tanh(c);
                let sq = g.hadamard(t, t)?;
                Ok(g.sum_all(sq))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::scalar(0.0);
        assert_eq!(
            elementwise(Elementwise::Sigmoid, &z, None)
                .unwrap()
                .get(0, 0),
            0.5
        );
        assert_eq!(
            elementwise(Elementwise::Tanh, &z, None).unwrap().get(0, 0),
            0.0
        );
        let a = Tensor::row_vector(vec![1.0, 2.0]);
        let b = Tensor::row_vector(vec![3.0, 4.0]);
        assert_eq!(
            elementwise(Elementwise::Hadamard, &a, Some(&b))
                .unwrap()
                .data(),
            &[3.0, 8.0]
        );
        assert!(elementwise(Elementwise::Add, &a, Some(&Tensor::zeros(1, 3))).is_err());
    }

    #[test]
    fn sigmoid_backward_at_1_2() {
        let err = gradient_check(|g, p| Ok(g.sigmoid(p[0])), &[Tensor::scalar(1.2)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_elementwise_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // keep abs away from its kink
        let a = Tensor::from_fn(2, 3, |_, _| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let b = random(&mut rng, 2, 3);
        for op in [
            Elementwise::Sigmoid,
            Elementwise::Tanh,
            Elementwise::Abs,
            Elementwise::Hadamard,
            Elementwise::Add,
            Elementwise::Sub,
        ] {
            let err = gradient_check(
                |g, p| {
                    let y = g.elementwise(op, p[0], Some(p[1]))?;
                    let sq = g.hadamard(y, y)?;
                    Ok(g.sum_all(sq))
                },
                &[a.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{op:?}: {err}");
        }
    }

    #[test]
    fn concat_examples_and_gradient() {
        let a = Tensor::from_rows(&[[1.0]]);
        let b = Tensor::from_rows(&[[2.0]]);
        assert_eq!(a.concat_cols(&b).unwrap().data(), &[1.0, 2.0]);
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(a.concat_cols(&Tensor::zeros(2, 0)).unwrap(), a);
        assert!(a.concat_cols(&Tensor::zeros(3, 1)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 2, 3);
        let y = random(&mut rng, 2, 2);
        let w = random(&mut rng, 2, 5);
        let err = gradient_check(
            |g, p| {
                let c = g.concat_cols(p[0], p[1])?;
                let wl = g.leaf(w.clone());
                let cw = g.hadamard(c, wl)?;
                let t = g.tanh(cw);
                Ok(g.sum_all(t))
            },
            &[x, y],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pool_examples() {
        let h = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(h.pool_rows(Pool::Mean).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(h.pool_rows(Pool::Max).unwrap().data(), &[3.0, 4.0]);
        let one = Tensor::from_rows(&[[0.5, -1.5]]);
        assert_eq!(one.pool_rows(Pool::Mean).unwrap(), one);
        assert_eq!(one.pool_rows(Pool::Max).unwrap(), one);
        assert!(matches!(
            Tensor::zeros(0, 2).pool_rows(Pool::Max),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::from_rows(&[[1.0, 5.0], [1.0, 2.0], [0.0, 5.0]]));
        let m = g.pool_rows(Pool::Max, h).unwrap();
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(h).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(&mut rng, 4, 3);
        let w = random(&mut rng, 1, 6);
        let err = gradient_check(
            |g, p| {
                let mean = g.pool_rows(Pool::Mean, p[0])?;
                let max = g.pool_rows(Pool::Max, p[0])?;
                let c = g.concat_cols(mean, max)?;
                let wl = g.leaf(w.clone());
                let cw = g.hadamard(c, wl)?;
                Ok(g.sum_all(cw))
            },
            &[h],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let (l, _) = softmax_cross_entropy(&Tensor::zeros(1, 4), 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
        let (l, _) = softmax_cross_entropy(&Tensor::row_vector(vec![30.0, 0.0, 0.0]), 0).unwrap();
        assert!(l < 1e-9);
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(1, 3), 3),
            Err(Error::IdOutOfRange { id: 3, size: 3 })
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_v7() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::from_fn(1, 7, |_, _| rng.gen_range(-3.0..3.0));
        let err = gradient_check(|g, p| g.softmax_cross_entropy(p[0], 4), &[logits], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradient_check_trivial_functions() {
        let err =
            gradient_check(|g, p| g.hadamard(p[0], p[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        // linear in both params
        let w = Tensor::row_vector(vec![0.3, -2.0, 7.5]);
        let err = gradient_check(
            |g, p| {
                let wl = g.leaf(w.clone());
                let a = g.hadamard(p[0], wl)?;
                let s = g.sum_all(a);
                let t = g.scale(p[1], -4.0);
                g.add(s, t)
            },
            &[
                Tensor::row_vector(vec![1.0, 2.0, -3.0]),
                Tensor::scalar(0.25),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn gradient_check_rejects_non_finite() {
        // log-like blowup: 1/x via softmax is awkward, so use a huge scale
        let res = gradient_check(
            |g, p| {
                let big = g.scale(p[0], f64::MAX);
                Ok(g.scale(big, 10.0))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.hadamard(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 3.0 + 4.0);
    }

    #[test]
    fn gather_slice_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = random(&mut rng, 5, 3);
        let err = gradient_check(
            |g, p| {
                let a = g.gather_rows(p[0], &[1, 3, 1])?;
                let s = g.slice_cols(a, 1, 2)?;
                let r0 = g.gather_rows(p[0], &[4])?;
                let r0s = g.slice_cols(r0, 0, 2)?;
                let st = g.stack_rows(&[s, r0s])?;
                let t = g.tanh(st);
                let sq = g.hadamard(t, st)?;
                Ok(g.sum_all(sq))
            },
            &[table],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(1, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a = random(&mut rng, 4, 4);
            let b = random(&mut rng, 4, 4);
            let c = random(&mut rng, 4, 4);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-10.0f64..10.0, rows * cols)
                .prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn pooling_is_permutation_invariant(
                h in (1usize..8, 1usize..5).prop_flat_map(|(n, d)| matrix(n, d)),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..h.rows()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let rows: Vec<Tensor> = order.iter().map(|&r| h.row_tensor(r)).collect();
                let refs: Vec<&Tensor> = rows.iter().collect();
                let p = Tensor::stack_rows(&refs).unwrap();
                let m0 = h.pool_rows(Pool::Mean).unwrap();
                let m1 = p.pool_rows(Pool::Mean).unwrap();
                prop_assert!(m0.max_abs_diff(&m1) <= 1e-12);
                prop_assert_eq!(h.pool_rows(Pool::Max).unwrap(), p.pool_rows(Pool::Max).unwrap());
            }

            #[test]
            fn softmax_cross_entropy_is_shift_invariant(
                logits in matrix(1, 6),
                target in 0usize..6,
                shift in -50.0f64..50.0,
            ) {
                let shifted = logits.map(|v| v + shift);
                let (a, _) = softmax_cross_entropy(&logits, target).unwrap();
                let (b, _) = softmax_cross_entropy(&shifted, target).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

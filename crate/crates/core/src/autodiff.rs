//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every forward op evaluates eagerly with the `linalg` kernels and records
//! itself on the [`Tape`]. Nodes are appended in evaluation order, so the tape
//! is already topologically sorted and `backward` is one reverse sweep.
//!
//! A tape supports exactly one `backward` call. Build a fresh tape per step.

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] LinalgError),
    #[error("{op}: argument outside the function domain")]
    Domain { op: &'static str },
    #[error("loss must be a 1x1 node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward has already been run on this tape")]
    BackwardAlreadyRun,
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
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
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    BroadcastRows(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    SliceCols(NodeId, usize),
    SelectCols(NodeId, Arc<Vec<usize>>),
    ConcatCols(Vec<NodeId>),
    QuadForm(NodeId, Arc<Matrix>),
    TrilMatVec(NodeId, Arc<Matrix>),
    TrilGram(NodeId, Arc<Vec<(usize, usize)>>),
    LogSumExp(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Packed row-major position of entry `(row, col)` of a lower triangle, `col <= row`.
#[inline]
pub fn tril_index(row: usize, col: usize) -> usize {
    debug_assert!(col <= row);
    row * (row + 1) / 2 + col
}

/// Number of packed entries in a `dim x dim` lower triangle.
#[inline]
pub fn tril_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Inverse of [`tril_len`]. Returns `None` when `len` is not triangular.
pub fn tril_dim(len: usize) -> Option<usize> {
    let d = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (tril_len(d) == len).then_some(d)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recording tape of matrix-valued nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` when the loss does
    /// not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `id`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).as_slice().iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::Domain { op: "div" });
        }
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div(a, b), needs))
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(AutodiffError::Invalid {
                op: "broadcast_rows",
                detail: format!("expected a single row, got {:?}", src.shape()),
            });
        }
        let row = src.row(0).to_vec();
        let value = Matrix::from_fn(rows, row.len(), |_, c| row[c]);
        let needs = self.needs(a);
        Ok(self.push(value, Op::BroadcastRows(a), needs))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let rows = self.value(a).rows();
        let b = self.broadcast_rows(row, rows)?;
        self.add(a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |v| v + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(AutodiffError::Domain { op: "log" });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// `ln(1 + eˣ)` via the overflow-free branch `max(x,0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).as_slice().iter().any(|&v| !(v >= 0.0)) {
            return Err(AutodiffError::Domain { op: "sqrt" });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]).expect("1x1");
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `n x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = Matrix::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::SumRows(a), needs)
    }

    /// Row sums, `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let sums: Vec<f64> = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Matrix::col_vector(&sums), Op::SumCols(a), needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start > end || end > src.cols() {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                detail: format!("range {start}..{end} outside {} columns", src.cols()),
            });
        }
        let value = src.slice_cols(start, end);
        let needs = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), needs))
    }

    /// Gathers columns by index; indices may repeat.
    pub fn select_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= src.cols()) {
            return Err(AutodiffError::Invalid {
                op: "select_cols",
                detail: format!("column {bad} outside {} columns", src.cols()),
            });
        }
        let value = src.select_cols(&cols);
        let needs = self.needs(a);
        Ok(self.push(value, Op::SelectCols(a, Arc::new(cols)), needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hstack(&mats)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Row-wise quadratic form `xᵢᵀ A xᵢ` against a constant matrix, `n x d -> n x 1`.
    pub fn quad_form(&mut self, x: NodeId, a: Arc<Matrix>) -> Result<NodeId> {
        let xv = self.value(x);
        if !a.is_square() || a.rows() != xv.cols() {
            return Err(LinalgError::DimensionMismatch {
                op: "quad_form",
                left: xv.shape(),
                right: a.shape(),
            }
            .into());
        }
        let ax = xv.matmul_t(&a)?;
        let vals: Vec<f64> = (0..xv.rows())
            .map(|r| crate::linalg::dot(xv.row(r), ax.row(r)))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Matrix::col_vector(&vals), Op::QuadForm(x, a), needs))
    }

    /// Row-wise `Lᵢ·εᵢ` where row `i` of `packed` holds the lower triangle of `Lᵢ`
    /// and `eps` is constant. `n x d(d+1)/2, n x d -> n x d`.
    pub fn tril_matvec(&mut self, packed: NodeId, eps: Arc<Matrix>) -> Result<NodeId> {
        let p = self.value(packed);
        let d = eps.cols();
        if p.cols() != tril_len(d) || p.rows() != eps.rows() {
            return Err(LinalgError::DimensionMismatch {
                op: "tril_matvec",
                left: p.shape(),
                right: eps.shape(),
            }
            .into());
        }
        let mut out = Matrix::zeros(p.rows(), d);
        for i in 0..p.rows() {
            let prow = p.row(i);
            let erow = eps.row(i);
            for r in 0..d {
                let base = tril_index(r, 0);
                out[(i, r)] = crate::linalg::dot(&prow[base..base + r + 1], &erow[..r + 1]);
            }
        }
        let needs = self.needs(packed);
        Ok(self.push(out, Op::TrilMatVec(packed, eps), needs))
    }

    /// Selected entries `(a, b)` of `Lᵢ·Lᵢᵀ` per row, `n x d(d+1)/2 -> n x pairs`.
    pub fn tril_gram(&mut self, packed: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        let p = self.value(packed);
        let d = tril_dim(p.cols()).ok_or_else(|| AutodiffError::Invalid {
            op: "tril_gram",
            detail: format!("{} is not a triangular count", p.cols()),
        })?;
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= d || b >= d) {
            return Err(AutodiffError::Invalid {
                op: "tril_gram",
                detail: format!("entry ({a},{b}) outside dimension {d}"),
            });
        }
        let mut out = Matrix::zeros(p.rows(), pairs.len());
        for i in 0..p.rows() {
            let prow = p.row(i);
            for (j, &(a, b)) in pairs.iter().enumerate() {
                let m = a.min(b);
                let (ra, rb) = (tril_index(a, 0), tril_index(b, 0));
                out[(i, j)] = crate::linalg::dot(&prow[ra..ra + m + 1], &prow[rb..rb + m + 1]);
            }
        }
        let needs = self.needs(packed);
        Ok(self.push(out, Op::TrilGram(packed, Arc::new(pairs)), needs))
    }

    /// Elementwise `ln Σⱼ exp(partⱼ)` over equally shaped nodes.
    pub fn log_sum_exp(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| AutodiffError::Invalid {
            op: "log_sum_exp",
            detail: "no operands".into(),
        })?;
        let shape = self.value(*first).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(LinalgError::DimensionMismatch {
                    op: "log_sum_exp",
                    left: shape,
                    right: self.value(p).shape(),
                }
                .into());
            }
        }
        for idx in 0..out.len() {
            let m = parts
                .iter()
                .map(|&p| self.value(p).as_slice()[idx])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = parts
                .iter()
                .map(|&p| (self.value(p).as_slice()[idx] - m).exp())
                .sum();
            out.as_mut_slice()[idx] = m + s.ln();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::LogSumExp(parts.to_vec()), needs))
    }

    /// Reverse sweep from a scalar `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Matrix| -> Result<()> {
            if !self.nodes[id.0].needs_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => existing.axpy(1.0, &delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_t(val(*b))?)?;
                }
                if self.needs(*b) {
                    acc(*b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.hadamard(val(*b))?)?;
                }
                if self.needs(*b) {
                    acc(*b, g.hadamard(val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.needs(*a) {
                    acc(*a, g.zip_map(bv, "div", |gi, bi| gi / bi)?)?;
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = y.zip_map(bv, "div", |yi, bi| -yi / bi)?;
                    acc(*b, g.hadamard(&t)?)?;
                }
            }
            Op::BroadcastRows(a) => {
                let mut s = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, s)?;
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?,
            )?,
            Op::Tanh(a) => acc(*a, g.zip_map(y, "tanh", |gi, t| gi * (1.0 - t * t))?)?,
            Op::Exp(a) => acc(*a, g.hadamard(y)?)?,
            Op::Log(a) => acc(*a, g.zip_map(val(*a), "log", |gi, x| gi / x)?)?,
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), "softplus", |gi, x| gi * sigmoid(x))?)?,
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, "sigmoid", |gi, s| gi * s * (1.0 - s))?)?,
            Op::Sqrt(a) => acc(*a, g.zip_map(y, "sqrt", |gi, s| gi / (2.0 * s))?)?,
            Op::Square(a) => acc(*a, g.zip_map(val(*a), "square", |gi, x| 2.0 * gi * x)?)?,
            Op::ClampMin(a, floor) => acc(
                *a,
                g.zip_map(val(*a), "clamp_min", |gi, x| if x > *floor { gi } else { 0.0 })?,
            )?,
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0]))?;
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |_, j| g[(0, j)]))?;
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]))?;
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, d)?;
            }
            Op::SelectCols(a, cols) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (j, &src) in cols.iter().enumerate() {
                        d[(i, src)] += g[(i, j)];
                    }
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        acc(p, g.slice_cols(offset, offset + w))?;
                    }
                    offset += w;
                }
            }
            Op::QuadForm(x, a) => {
                let xv = val(*x);
                let sym = a.add(&a.transpose())?;
                let mut d = xv.matmul_t(&sym)?;
                for i in 0..d.rows() {
                    let gi = g[(i, 0)];
                    d.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                acc(*x, d)?;
            }
            Op::TrilMatVec(packed, eps) => {
                let (r, c) = val(*packed).shape();
                let dim = eps.cols();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for row in 0..dim {
                        let gi = g[(i, row)];
                        let base = tril_index(row, 0);
                        for col in 0..=row {
                            d[(i, base + col)] += gi * eps[(i, col)];
                        }
                    }
                }
                acc(*packed, d)?;
            }
            Op::TrilGram(packed, pairs) => {
                let pv = val(*packed);
                let mut d = Matrix::zeros(pv.rows(), pv.cols());
                for i in 0..pv.rows() {
                    for (j, &(a, b)) in pairs.iter().enumerate() {
                        let gi = g[(i, j)];
                        let (ra, rb) = (tril_index(a, 0), tril_index(b, 0));
                        for k in 0..=a.min(b) {
                            d[(i, ra + k)] += gi * pv[(i, rb + k)];
                            d[(i, rb + k)] += gi * pv[(i, ra + k)];
                        }
                    }
                }
                acc(*packed, d)?;
            }
            Op::LogSumExp(parts) => {
                for &p in parts {
                    if self.needs(p) {
                        let w = val(p).zip_map(y, "log_sum_exp", |x, l| (x - l).exp())?;
                        acc(p, g.hadamard(&w)?)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference gradient of `f` at `x`.
    fn fd_grad(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(ad: &Matrix, fd: &Matrix) -> f64 {
        ad.as_slice()
            .iter()
            .zip(fd.as_slice())
            .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_values() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[-1.0, 0.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).as_slice(), &[0.0, 0.0]);
        let s = t.softplus(x);
        assert!((t.value(s)[(0, 1)] - 2f64.ln()).abs() < 1e-15);
        assert!((t.value(s)[(0, 1)] - 0.693147).abs() < 1e-6);
        // the stable branch survives large arguments
        let big = t.constant(Matrix::row_vector(&[800.0, -800.0]));
        let sb = t.softplus(big);
        assert_eq!(t.value(sb).as_slice()[0], 800.0);
        assert!(t.value(sb).as_slice()[1] >= 0.0);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let b = t.leaf(Matrix::row_vector(&[3.0, 4.0, 5.0]));
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c).cols(), 5);
        let a2 = t.slice_cols(c, 0, 2).unwrap();
        let b2 = t.slice_cols(c, 2, 5).unwrap();
        assert_eq!(t.value(a2), t.value(a));
        assert_eq!(t.value(b2), t.value(b));
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(3, 2, 0.3));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn quad_form_gradient_is_two_a_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = rand_matrix(4, 4, &mut rng);
        a.symmetrize();
        let a = Arc::new(a);
        let x0 = rand_matrix(1, 4, &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let q = t.quad_form(x, a.clone()).unwrap();
        let s = t.sum(q);
        let g = t.backward(s).unwrap().wrt(x);
        let expected = x0.matmul(&a).unwrap().scale(2.0);
        assert!(g.max_abs_diff(&expected) < 1e-12);
        let fd = fd_grad(&x0, 1e-5, |xv| {
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let q = t.quad_form(x, a.clone()).unwrap();
            t.value(q)[(0, 0)]
        });
        assert!(max_rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn backward_is_single_shot() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 2.0));
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.backward(y).unwrap_err(), AutodiffError::BackwardAlreadyRun);
    }

    #[test]
    fn non_scalar_and_domain_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[1.0, -1.0]));
        assert!(matches!(t.log(x), Err(AutodiffError::Domain { .. })));
        assert!(matches!(
            t.backward(x),
            Err(AutodiffError::NonScalarLoss { rows: 1, cols: 2 })
        ));
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::Shape(_))));
    }

    /// Builds a scalar loss exercising every op kind from a single parameter vector.
    fn every_op_loss(t: &mut Tape, params: &[NodeId; 4], consts: &Consts) -> NodeId {
        let [w, b, x, p] = *params;
        let h = t.matmul(x, w).unwrap();
        let h = t.add_row(h, b).unwrap();
        let h1 = t.tanh(h);
        let h2 = t.relu(h);
        let h3 = t.softplus(h);
        let h4 = t.sigmoid(h);
        let e = t.exp(h1);
        let sq = t.square(h2);
        let m = t.mul(e, h3).unwrap();
        let dv = t.div(m, e).unwrap();
        let s = t.sub(dv, h4).unwrap();
        let s = t.add(s, sq).unwrap();
        let sp = t.add_scalar(h3, 0.5);
        let lg = t.log(sp).unwrap();
        let rt = t.sqrt(sp).unwrap();
        let cl = t.clamp_min(h, -0.3);
        let cat = t.concat_cols(&[s, lg, rt, cl]).unwrap();
        let sel = t.select_cols(cat, vec![0, 3, 3, 5, 7, 1]).unwrap();
        let sl = t.slice_cols(sel, 1, 4).unwrap();
        let q = t.quad_form(sl, consts.quad.clone()).unwrap();
        let tv = t.tril_matvec(p, consts.eps.clone()).unwrap();
        let gr = t.tril_gram(p, vec![(0, 0), (2, 1), (1, 2), (2, 2)]).unwrap();
        let lse = t.log_sum_exp(&[tv, sl]).unwrap();
        let rows = t.sum_rows(gr);
        let cols = t.sum_cols(lse);
        let a1 = t.sum(q);
        let a2 = t.sum(rows);
        let a3 = t.mean(cols);
        let tot = t.add(a1, a2).unwrap();
        let tot = t.add(tot, a3).unwrap();
        t.scale(tot, 0.7)
    }

    struct Consts {
        quad: Arc<Matrix>,
        eps: Arc<Matrix>,
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..4 {
            checked += check_every_op(seed);
        }
        assert!(checked >= 100);
    }

    fn check_every_op(seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let init = [
            rand_matrix(4, 2, &mut rng),
            rand_matrix(1, 2, &mut rng),
            rand_matrix(n, 4, &mut rng),
            rand_matrix(n, 6, &mut rng),
        ];
        let consts = Consts {
            quad: Arc::new(rand_matrix(3, 3, &mut rng)),
            eps: Arc::new(rand_matrix(n, 3, &mut rng)),
        };
        let mut t = Tape::new();
        let ids = [
            t.leaf(init[0].clone()),
            t.leaf(init[1].clone()),
            t.leaf(init[2].clone()),
            t.leaf(init[3].clone()),
        ];
        let loss = every_op_loss(&mut t, &ids, &consts);
        let grads = t.backward(loss).unwrap();
        let mut checked = 0;
        for which in 0..4 {
            let ad = grads.wrt(ids[which]);
            let fd = fd_grad(&init[which], 1e-5, |v| {
                let mut vals = init.clone();
                vals[which] = v.clone();
                let mut t = Tape::new();
                let ids = [
                    t.leaf(vals[0].clone()),
                    t.leaf(vals[1].clone()),
                    t.leaf(vals[2].clone()),
                    t.leaf(vals[3].clone()),
                ];
                let l = every_op_loss(&mut t, &ids, &consts);
                t.scalar(l)
            });
            assert!(max_rel_err(&ad, &fd) < 1e-4, "param {which}: {ad:?} vs {fd:?}");
            checked += ad.len();
        }
        checked
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_matrix(2, 3, &mut rng);
        let grad_of = |fa: f64, fb: f64| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let f = t.tanh(x);
            let f = t.sum(f);
            let gq = t.square(x);
            let gq = t.sum(gq);
            let a = t.scale(f, fa);
            let b = t.scale(gq, fb);
            let l = t.add(a, b).unwrap();
            t.backward(l).unwrap().wrt(x)
        };
        let combo = grad_of(2.5, -1.5);
        let lin = grad_of(1.0, 0.0)
            .scale(2.5)
            .add(&grad_of(0.0, 1.0).scale(-1.5))
            .unwrap();
        assert!(combo.max_abs_diff(&lin) < 1e-10);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(2, 2, 1.0));
        let unused = t.leaf(Matrix::filled(1, 3, 1.0));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Matrix::zeros(1, 3));
    }

    #[test]
    fn tril_helpers() {
        assert_eq!(tril_len(4), 10);
        assert_eq!(tril_dim(10), Some(4));
        assert_eq!(tril_dim(7), None);
        assert_eq!(tril_index(2, 1), 4);
    }
}

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients of a scalar loss keyed by parameter key.
pub type GradMap = BTreeMap<usize, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatVec(Var, Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Square(Var),
    SumAll(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    BroadcastRows(Var),
    BroadcastCols(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatVec(..) => "batch_matvec",
            Op::Relu(_) => "relu",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatVec(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Nodes only reference earlier nodes, so reverse construction order is a
/// valid topological order for the backward sweep. One tape is built per
/// loss evaluation and dropped afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf under `key`. The gradient map returned by
    /// [`Tape::backward`] always contains every registered key.
    pub fn param(&mut self, key: usize, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(key),
            requires_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.push((key, var));
        var
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, DiffError> {
        let node = self.nodes.len();
        if let Some(index) = value.first_non_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node,
                index,
                cols: value.cols(),
            });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[r, c] + row[c]` for every row `r`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tr.len() != ta.cols() || tr.rows() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::AddRow(a, row), value)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let value = Tensor::matrix(r, c, matmul_nn(ta.data(), tb.data(), r, k, c));
        self.push(Op::MatMul(a, b), value)
    }

    /// Per-row matrix-vector product: `a` is `[M, r*c]` holding one row-major
    /// `r x c` matrix per sample, `v` is `[M, c]`; the result is `[M, r]`.
    pub fn batch_matvec(&mut self, a: Var, v: Var) -> Result<Var, DiffError> {
        let (ta, tv) = (self.value(a), self.value(v));
        let (m, c) = (tv.rows(), tv.cols());
        if ta.shape().len() != 2 || tv.shape().len() != 2 || ta.rows() != m || ta.cols() % c != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "batch_matvec",
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let r = ta.cols() / c;
        let mut out = vec![0.0; m * r];
        for s in 0..m {
            let arow = ta.row(s);
            let vrow = tv.row(s);
            for i in 0..r {
                out[s * r + i] = arow[i * c..(i + 1) * c]
                    .iter()
                    .zip(vrow)
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        self.push(Op::BatchMatVec(a, v), Tensor::matrix(m, r, out))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let data = (0..r)
            .map(|i| ta.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Op::SumCols(a), Tensor::matrix(r, 1, data))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::Empty("concat"));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(rows, cols, data))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || start + len > ta.cols() {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), Tensor::matrix(rows, len, data))
    }

    /// Repeats a single row (`[c]` or `[1, c]`) into `[rows, c]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.rows() != 1 || ta.shape().len() > 2 {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_rows",
                left: ta.shape().to_vec(),
                right: vec![rows],
            });
        }
        let value = Tensor::repeat_row(ta.data(), rows);
        self.push(Op::BroadcastRows(a), value)
    }

    /// Repeats a column `[r, 1]` into `[r, cols]`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || ta.cols() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_cols",
                left: ta.shape().to_vec(),
                right: vec![cols],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * cols);
        for &v in ta.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Op::BroadcastCols(a), Tensor::matrix(rows, cols, data))
    }

    /// Reverse sweep from a scalar `loss`, returning `d loss / d p` for every
    /// registered parameter. Intermediate gradients are dropped as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<GradMap, DiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(DiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = GradMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(key) = node.op {
                match out.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(key, g);
                    }
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for &(key, var) in &self.params {
            out.entry(key)
                .or_insert_with(|| Tensor::zeros(self.value(var).shape()));
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
        };

        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone());
                }
                if wants(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, g.clone());
                }
                if wants(*b) {
                    send(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = zip(g, val(*b), |gi, bi| gi * bi);
                    send(*a, like(*a, d));
                }
                if wants(*b) {
                    let d = zip(g, val(*a), |gi, ai| gi * ai);
                    send(*b, like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    send(*a, like(*a, zip(g, tb, |gi, bi| gi / bi)));
                }
                if wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .zip(tb.data())
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect();
                    send(*b, like(*b, d));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    send(*a, g.clone());
                }
                if wants(*row) {
                    send(*row, like(*row, column_sums(g)));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    // dA = G B^T
                    send(*a, like(*a, matmul_nt(g.data(), tb.data(), r, c, k)));
                }
                if wants(*b) {
                    // dB = A^T G
                    send(*b, like(*b, matmul_tn(ta.data(), g.data(), r, k, c)));
                }
            }
            Op::BatchMatVec(a, v) => {
                let (ta, tv) = (val(*a), val(*v));
                let (m, c) = (tv.rows(), tv.cols());
                let r = ta.cols() / c;
                if wants(*a) {
                    let mut d = vec![0.0; m * r * c];
                    for s in 0..m {
                        for i in 0..r {
                            let gi = g.data()[s * r + i];
                            for j in 0..c {
                                d[s * r * c + i * c + j] = gi * tv.data()[s * c + j];
                            }
                        }
                    }
                    send(*a, like(*a, d));
                }
                if wants(*v) {
                    let mut d = vec![0.0; m * c];
                    for s in 0..m {
                        for i in 0..r {
                            let gi = g.data()[s * r + i];
                            for j in 0..c {
                                d[s * c + j] += gi * ta.data()[s * r * c + i * c + j];
                            }
                        }
                    }
                    send(*v, like(*v, d));
                }
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let d = zip(g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                send(*a, like(*a, d));
            }
            Op::Sin(a) => send(*a, like(*a, zip(g, val(*a), |gi, x| gi * x.cos()))),
            Op::Cos(a) => send(*a, like(*a, zip(g, val(*a), |gi, x| -gi * x.sin()))),
            Op::Exp(a) => send(*a, like(*a, zip(g, &node.value, |gi, y| gi * y))),
            Op::Square(a) => send(*a, like(*a, zip(g, val(*a), |gi, x| 2.0 * gi * x))),
            Op::SumAll(a) => {
                let gi = g.item();
                send(*a, Tensor::full(val(*a).shape(), gi));
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut d = Vec::with_capacity(ta.len());
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                send(*a, like(*a, d));
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        send(p, like(p, d));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let (rows, cols) = (ta.rows(), ta.cols());
                let len = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                send(*a, like(*a, d));
            }
            Op::BroadcastRows(a) => send(*a, like(*a, column_sums(g))),
            Op::BroadcastCols(a) => {
                let c = g.cols();
                let d = (0..g.rows())
                    .map(|r| g.data()[r * c..(r + 1) * c].iter().sum())
                    .collect();
                send(*a, like(*a, d));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for chunk in g.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `A[r,k] * B[k,c]`
fn matmul_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `G[r,c] * B[k,c]^T`
fn matmul_nt(g: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            out[i * k + p] = grow
                .iter()
                .zip(&b[p * c..(p + 1) * c])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `A[r,k]^T * G[r,c]`
fn matmul_tn(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, gv) in out[p * c..(p + 1) * c].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

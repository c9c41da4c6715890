//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Leaves
//! are either constants or parameters read from a [`ParamStore`]; parameters
//! flagged trainable get gradients, everything else is treated as a constant
//! and the backward pass skips subgraphs that cannot reach a trainable leaf.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, log_softmax_in_place, sigmoid, softmax_in_place, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

/// Primitive operations. All operate on rank-2 tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// `r x c` plus a `1 x c` row broadcast over rows.
    AddRow,
    /// `r x c` times an `r x 1` column broadcast over columns.
    MulCol,
    Scale(f64),
    Tanh,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax.
    LogSoftmax,
    /// Column-wise concatenation.
    Concat,
    SliceCols { start: usize, len: usize },
    /// Overwrite positions where `mask` is true with `value`.
    MaskedFill { mask: Vec<bool>, value: f64 },
    Sum,
    Mean,
    /// Rows of a table, e.g. an embedding lookup.
    Gather { rows: Vec<usize> },
    /// One element per row, giving an `r x 1` column.
    Pick { cols: Vec<usize> },
    /// Repeat every row `times` times consecutively.
    RepeatRows { times: usize },
    /// Sum each run of `size` consecutive rows; adjoint of `RepeatRows`.
    GroupSum { size: usize },
    Reshape { rows: usize, cols: usize },
    Transpose,
    /// Row `i` from the first input where `mask[i]`, else from the second.
    Select { mask: Vec<bool> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulCol => "mul_col",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Gather { .. } => "gather",
            Op::Pick { .. } => "pick",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GroupSum { .. } => "group_sum",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
            Op::Select { .. } => "select",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Concat => None,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::AddRow | Op::MulCol | Op::Select { .. } => {
                Some(2)
            }
            _ => Some(1),
        }
    }
}

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    tracing: bool,
    trainable: Option<&'p [bool]>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    /// A tracing tape on which every parameter of `store` is trainable.
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            tracing: true,
            trainable: None,
            params: HashMap::new(),
        }
    }

    /// A tracing tape on which only parameters with `trainable[id]` get gradients.
    pub fn with_trainable(store: &'p ParamStore, trainable: &'p [bool]) -> Self {
        Tape {
            trainable: Some(trainable),
            ..Self::new(store)
        }
    }

    /// A non-tracing tape; `backward` is rejected.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape {
            tracing: false,
            ..Self::new(store)
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Value<'p>, op: Op, parents: Vec<Var>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, Vec::new(), false, None)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, Vec::new(), false, None)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = self.tracing && self.trainable.is_none_or(|mask| mask[id.0]);
        let v = self.push(
            Value::Borrowed(self.store.get(id)),
            Op::Leaf,
            Vec::new(),
            trainable,
            Some(id),
        );
        self.params.insert(id, v);
        v
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        }
        if op == Op::Leaf {
            return Err(Error::invalid("leaf nodes are created with constant/param"));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&op, &vals)?;
        let requires_grad = self.tracing && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Value::Owned(out), op, inputs.to_vec(), requires_grad, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[a, row])
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(Op::MulCol, &[a, col])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Op::Scale(k), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceCols { start, len }, &[a])
    }
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        self.apply(Op::MaskedFill { mask, value }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { rows }, &[table])
    }
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        self.apply(Op::Pick { cols }, &[a])
    }
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.apply(Op::RepeatRows { times }, &[a])
    }
    pub fn group_sum(&mut self, a: Var, size: usize) -> Result<Var> {
        self.apply(Op::GroupSum { size }, &[a])
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.apply(Op::Reshape { rows, cols }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Select { mask }, &[a, b])
    }

    /// `x W + b` for a row-batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter that it depends on. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<GradientMap> {
        if !self.tracing {
            return Err(Error::invalid("backward on a non-tracing tape"));
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape.to_vec(),
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = GradientMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op == Op::Leaf {
                if let Some(id) = node.param {
                    out.insert(id, g);
                }
                continue;
            }
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| self.value(*p)).collect();
            let pgrads = backward_op(&node.op, &inputs, node.value.get(), &g, &needs);
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

fn mismatch(op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bad_arg(op: &Op, a: &Tensor, detail: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: detail.to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("kernel produced consistent shape")
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    for t in x {
        t.dims2(name)?;
    }
    match op {
        Op::Leaf => unreachable!(),
        Op::MatMul => {
            let (m, k) = x[0].dims2(name)?;
            let (k2, n) = x[1].dims2(name)?;
            if k != k2 {
                return Err(mismatch(op, x[0], x[1]));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x[0].data(), false, x[1].data(), false, &mut out, 0.0);
            Ok(mat(m, n, out))
        }
        Op::Add | Op::Sub | Op::Mul => {
            if x[0].shape() != x[1].shape() {
                return Err(mismatch(op, x[0], x[1]));
            }
            Ok(match op {
                Op::Add => zip_map(x[0], x[1], |a, b| a + b),
                Op::Sub => zip_map(x[0], x[1], |a, b| a - b),
                _ => zip_map(x[0], x[1], |a, b| a * b),
            })
        }
        Op::AddRow => {
            let (r, c) = x[0].dims2(name)?;
            if x[1].shape() != [1, c] {
                return Err(mismatch(op, x[0], x[1]));
            }
            let row = x[1].data();
            let mut out = x[0].data().to_vec();
            for chunk in out.chunks_exact_mut(c) {
                for (o, b) in chunk.iter_mut().zip(row) {
                    *o += b;
                }
            }
            Ok(mat(r, c, out))
        }
        Op::MulCol => {
            let (r, c) = x[0].dims2(name)?;
            if x[1].shape() != [r, 1] {
                return Err(mismatch(op, x[0], x[1]));
            }
            let col = x[1].data();
            let mut out = x[0].data().to_vec();
            for (chunk, s) in out.chunks_exact_mut(c).zip(col) {
                for o in chunk.iter_mut() {
                    *o *= s;
                }
            }
            Ok(mat(r, c, out))
        }
        Op::Scale(k) => Ok(x[0].map(|v| v * k)),
        Op::Tanh => Ok(x[0].map(f64::tanh)),
        Op::Sigmoid => Ok(x[0].map(sigmoid)),
        Op::Softmax | Op::LogSoftmax => {
            let (r, c) = x[0].dims2(name)?;
            let mut out = x[0].data().to_vec();
            for row in out.chunks_exact_mut(c) {
                if *op == Op::Softmax {
                    softmax_in_place(row);
                } else {
                    log_softmax_in_place(row);
                }
            }
            Ok(mat(r, c, out))
        }
        Op::Concat => {
            if x.is_empty() {
                return Err(Error::invalid("concat of zero tensors"));
            }
            let r = x[0].rows();
            for t in &x[1..] {
                if t.rows() != r {
                    return Err(mismatch(op, x[0], t));
                }
            }
            let total: usize = x.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for t in x {
                    out.extend_from_slice(t.row_slice(i));
                }
            }
            Ok(mat(r, total, out))
        }
        Op::SliceCols { start, len } => {
            let (r, c) = x[0].dims2(name)?;
            if *len == 0 || start + len > c {
                return Err(bad_arg(op, x[0], &[*start, *len]));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x[0].row_slice(i)[*start..start + len]);
            }
            Ok(mat(r, *len, out))
        }
        Op::MaskedFill { mask, value } => {
            if mask.len() != x[0].numel() {
                return Err(bad_arg(op, x[0], &[mask.len()]));
            }
            let data = x[0]
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { *value } else { v })
                .collect();
            Tensor::new(x[0].shape().to_vec(), data)
        }
        Op::Sum => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Op::Mean => Ok(Tensor::scalar(
            x[0].data().iter().sum::<f64>() / x[0].numel() as f64,
        )),
        Op::Gather { rows } => {
            let (r, c) = x[0].dims2(name)?;
            if rows.is_empty() {
                return Err(bad_arg(op, x[0], &[0]));
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::OutOfVocab { id: i, size: r });
                }
                out.extend_from_slice(x[0].row_slice(i));
            }
            Ok(mat(rows.len(), c, out))
        }
        Op::Pick { cols } => {
            let (r, c) = x[0].dims2(name)?;
            if cols.len() != r || cols.iter().any(|&j| j >= c) {
                return Err(bad_arg(op, x[0], cols));
            }
            let out = cols.iter().enumerate().map(|(i, &j)| x[0].get(i, j)).collect();
            Ok(mat(r, 1, out))
        }
        Op::RepeatRows { times } => {
            let (r, c) = x[0].dims2(name)?;
            if *times == 0 {
                return Err(bad_arg(op, x[0], &[0]));
            }
            let mut out = Vec::with_capacity(r * c * times);
            for row in x[0].data().chunks_exact(c) {
                for _ in 0..*times {
                    out.extend_from_slice(row);
                }
            }
            Ok(mat(r * times, c, out))
        }
        Op::GroupSum { size } => {
            let (r, c) = x[0].dims2(name)?;
            if *size == 0 || r % size != 0 {
                return Err(bad_arg(op, x[0], &[*size]));
            }
            let mut out = Vec::with_capacity(r / size * c);
            for group in x[0].data().chunks_exact(size * c) {
                let mut acc = group[..c].to_vec();
                for row in group[c..].chunks_exact(c) {
                    for (o, v) in acc.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.extend_from_slice(&acc);
            }
            Ok(mat(r / size, c, out))
        }
        Op::Reshape { rows, cols } => {
            if rows * cols != x[0].numel() {
                return Err(bad_arg(op, x[0], &[*rows, *cols]));
            }
            Tensor::matrix(*rows, *cols, x[0].data().to_vec())
        }
        Op::Transpose => {
            let (r, c) = x[0].dims2(name)?;
            let src = x[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            Ok(mat(c, r, out))
        }
        Op::Select { mask } => {
            if x[0].shape() != x[1].shape() {
                return Err(mismatch(op, x[0], x[1]));
            }
            if mask.len() != x[0].rows() {
                return Err(bad_arg(op, x[0], &[mask.len()]));
            }
            let c = x[0].cols();
            let mut out = Vec::with_capacity(x[0].numel());
            for (i, &m) in mask.iter().enumerate() {
                let src = if m { x[0] } else { x[1] };
                out.extend_from_slice(&src.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(x[0].shape().to_vec(), out)
        }
    }
}

fn backward_op(op: &Op, x: &[&Tensor], y: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (m, k) = (x[0].rows(), x[0].cols());
            let n = x[1].cols();
            let da = need(0).then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, x[1].data(), true, &mut d, 0.0);
                mat(m, k, d)
            });
            let db = need(1).then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, x[0].data(), true, g.data(), false, &mut d, 0.0);
                mat(k, n, d)
            });
            vec![da, db]
        }
        Op::Add => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
        Op::Sub => vec![need(0).then(|| g.clone()), need(1).then(|| g.map(|v| -v))],
        Op::Mul => vec![
            need(0).then(|| zip_map(g, x[1], |a, b| a * b)),
            need(1).then(|| zip_map(g, x[0], |a, b| a * b)),
        ],
        Op::AddRow => {
            let c = g.cols();
            let db = need(1).then(|| {
                let mut d = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (o, v) in d.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                mat(1, c, d)
            });
            vec![need(0).then(|| g.clone()), db]
        }
        Op::MulCol => {
            let (r, c) = (g.rows(), g.cols());
            let da = need(0).then(|| {
                let mut d = g.data().to_vec();
                for (chunk, s) in d.chunks_exact_mut(c).zip(x[1].data()) {
                    for o in chunk.iter_mut() {
                        *o *= s;
                    }
                }
                mat(r, c, d)
            });
            let db = need(1).then(|| {
                let d = g
                    .data()
                    .chunks_exact(c)
                    .zip(x[0].data().chunks_exact(c))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(a, b)| a * b).sum())
                    .collect();
                mat(r, 1, d)
            });
            vec![da, db]
        }
        Op::Scale(k) => vec![need(0).then(|| g.map(|v| v * k))],
        Op::Tanh => vec![need(0).then(|| zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
        Op::Sigmoid => vec![need(0).then(|| zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
        Op::Softmax => {
            let c = y.cols();
            let mut d = vec![0.0; y.numel()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(g.data().chunks_exact(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(mat(y.rows(), c, d))]
        }
        Op::LogSoftmax => {
            let c = y.cols();
            let mut d = vec![0.0; y.numel()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(g.data().chunks_exact(c))
            {
                let total: f64 = gr.iter().sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * total;
                }
            }
            vec![Some(mat(y.rows(), c, d))]
        }
        Op::Concat => {
            let r = g.rows();
            let mut start = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let c = t.cols();
                    let s = start;
                    start += c;
                    need(i).then(|| {
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&g.row_slice(row)[s..s + c]);
                        }
                        mat(r, c, d)
                    })
                })
                .collect()
        }
        Op::SliceCols { start, len } => {
            let (r, c) = (x[0].rows(), x[0].cols());
            let mut d = vec![0.0; r * c];
            for row in 0..r {
                d[row * c + start..row * c + start + len].copy_from_slice(g.row_slice(row));
            }
            vec![Some(mat(r, c, d))]
        }
        Op::MaskedFill { mask, .. } => {
            let data = g
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
        }
        Op::Sum => vec![Some(Tensor::filled(x[0].rows(), x[0].cols(), g.item()))],
        Op::Mean => {
            let n = x[0].numel() as f64;
            vec![Some(Tensor::filled(x[0].rows(), x[0].cols(), g.item() / n))]
        }
        Op::Gather { rows } => {
            let (r, c) = (x[0].rows(), x[0].cols());
            let mut d = vec![0.0; r * c];
            for (k, &i) in rows.iter().enumerate() {
                for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                    *o += v;
                }
            }
            vec![Some(mat(r, c, d))]
        }
        Op::Pick { cols } => {
            let (r, c) = (x[0].rows(), x[0].cols());
            let mut d = vec![0.0; r * c];
            for (i, &j) in cols.iter().enumerate() {
                d[i * c + j] = g.data()[i];
            }
            vec![Some(mat(r, c, d))]
        }
        Op::RepeatRows { times } => {
            let c = g.cols();
            let mut d = Vec::with_capacity(x[0].numel());
            for group in g.data().chunks_exact(times * c) {
                let mut acc = group[..c].to_vec();
                for row in group[c..].chunks_exact(c) {
                    for (o, v) in acc.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                d.extend_from_slice(&acc);
            }
            vec![Some(mat(x[0].rows(), c, d))]
        }
        Op::GroupSum { size } => {
            let c = g.cols();
            let mut d = Vec::with_capacity(x[0].numel());
            for row in g.data().chunks_exact(c) {
                for _ in 0..*size {
                    d.extend_from_slice(row);
                }
            }
            vec![Some(mat(x[0].rows(), c, d))]
        }
        Op::Reshape { .. } => vec![Some(
            Tensor::new(x[0].shape().to_vec(), g.data().to_vec()).expect("same numel"),
        )],
        Op::Transpose => {
            let (r, c) = (g.rows(), g.cols());
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g.data()[i * c + j];
                }
            }
            vec![Some(mat(c, r, d))]
        }
        Op::Select { mask } => {
            let c = g.cols();
            let split = |keep: bool| {
                let mut d = g.data().to_vec();
                for (chunk, &m) in d.chunks_exact_mut(c).zip(mask) {
                    if m != keep {
                        chunk.fill(0.0);
                    }
                }
                Tensor::new(g.shape().to_vec(), d).expect("same shape")
            };
            vec![need(0).then(|| split(true)), need(1).then(|| split(false))]
        }
    }
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// Every parameter of `store` is perturbed by `±epsilon` one coordinate at a
/// time. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(store: &ParamStore, f: F, epsilon: f64) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("grad_check epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[k]);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

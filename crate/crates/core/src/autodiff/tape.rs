use super::tensor::{gemm, ShapeDisplay, Tensor};
use super::AdError;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Dot(usize, usize),
    Sum(usize),
    Broadcast(usize),
    Transpose(usize),
    Reshape(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Power(usize, f64),
    Max(usize, usize),
    Concat(Rc<[usize]>),
    Slice { src: usize, start: usize },
    Pad { src: usize, start: usize },
    AddRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Rehu(usize, f64),
    RehuSlope(usize, f64),
}

impl Op {
    fn operands(&self) -> OperandIter<'_> {
        use Op::*;
        let (a, b): (Option<usize>, Option<usize>) = match *self {
            Leaf => (None, None),
            Add(x, y) | Sub(x, y) | Mul(x, y) | MatMul(x, y) | MatVec(x, y) | Dot(x, y)
            | Max(x, y) | AddRow(x, y) => (Some(x), Some(y)),
            Scale(x, _) | Neg(x) | Sum(x) | Broadcast(x) | Transpose(x) | Reshape(x) | Sin(x)
            | Cos(x) | Exp(x) | Log(x) | Tanh(x) | Softplus(x) | Sigmoid(x) | Square(x)
            | Power(x, _) | SumRows(x) | BroadcastRows(x) | Rehu(x, _) | RehuSlope(x, _) => {
                (Some(x), None)
            }
            Slice { src, .. } | Pad { src, .. } | GatherRows(src, _) | ScatterRows(src, _) => {
                (Some(src), None)
            }
            Concat(ref parts) => return OperandIter::Many(parts.iter()),
        };
        OperandIter::Few([a, b], 0)
    }
}

enum OperandIter<'a> {
    Few([Option<usize>; 2], usize),
    Many(std::slice::Iter<'a, usize>),
}

impl Iterator for OperandIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            OperandIter::Few(arr, i) => {
                while *i < 2 {
                    let v = arr[*i];
                    *i += 1;
                    if v.is_some() {
                        return v;
                    }
                }
                None
            }
            OperandIter::Many(it) => it.next().copied(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Option<Aux>,
}

/// Softplus slope saved by the forward pass: raw values until a backward
/// pass first needs them, then the node that holds them.
enum Aux {
    Slope(Tensor),
    Node(usize),
}

/// Primitive operations accepted by [`Tape::record`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Neg,
    MatVec,
    MatMul,
    Dot,
    Sum,
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Square,
    Power(f64),
    Max,
    Concat,
    Slice { start: usize, len: usize },
    Transpose,
    Reshape(Vec<usize>),
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Every operation stores its primal value eagerly. Gradients can be taken
/// either numerically ([`Tape::grad`]) or as new nodes on the same tape
/// ([`Tape::grad_graph`]), which can then be differentiated again.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type Res = Result<Var, AdError>;

fn same_or_scalar(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.numel() == 1 {
        let s = b.item();
        a.map(|x| f(x, s))
    } else {
        let s = a.item();
        b.map(|y| f(s, y))
    }
}

/// `ln(1 + e)` for `e ∈ [0, 1]`, accurate to a few ulps and cheaper than
/// the general `ln_1p`.
fn ln_1p_unit(e: f64) -> f64 {
    let u = 1.0 + e;
    if u == 1.0 {
        e
    } else {
        u.ln() * e / (u - 1.0)
    }
}

fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let s = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (x.max(0.0) + ln_1p_unit(e), s)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rectified Huber unit: zero below 0, quadratic on (0, δ), linear above.
pub fn rehu(x: f64, delta: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < delta {
        x * x / (2.0 * delta)
    } else {
        x - delta / 2.0
    }
}

fn rehu_slope(x: f64, delta: f64) -> f64 {
    (x / delta).clamp(0.0, 1.0)
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value, aux: None });
        Var { id: self.nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(AdError::ForeignNode { index: v.id });
        }
        Ok(v.id)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn shape_of(&self, i: usize) -> ShapeDisplay {
        ShapeDisplay(self.nodes[i].value.shape().to_vec())
    }

    fn mismatch(&self, op: &'static str, ids: &[usize]) -> AdError {
        AdError::ShapeMismatch { op, shapes: ids.iter().map(|&i| self.shape_of(i)).collect() }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Input that is never differentiated (it still may be listed in `wrt`).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    /// Generic entry point: record `op` applied to `operands`.
    pub fn record(&mut self, op: Primitive, operands: &[Var]) -> Res {
        let arity = |n: usize| -> Result<(), AdError> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(AdError::Arity { expected: n, got: operands.len() })
            }
        };
        match op {
            Primitive::Concat => self.concat(operands),
            _ => {
                let unary = matches!(
                    op,
                    Primitive::Scale(_)
                        | Primitive::Neg
                        | Primitive::Sum
                        | Primitive::Sin
                        | Primitive::Cos
                        | Primitive::Exp
                        | Primitive::Log
                        | Primitive::Tanh
                        | Primitive::Softplus
                        | Primitive::Sigmoid
                        | Primitive::Square
                        | Primitive::Power(_)
                        | Primitive::Slice { .. }
                        | Primitive::Transpose
                        | Primitive::Reshape(_)
                );
                arity(if unary { 1 } else { 2 })?;
                let a = operands[0];
                match op {
                    Primitive::Add => self.add(a, operands[1]),
                    Primitive::Sub => self.sub(a, operands[1]),
                    Primitive::Mul => self.mul(a, operands[1]),
                    Primitive::MatVec => self.matvec(a, operands[1]),
                    Primitive::MatMul => self.matmul(a, operands[1]),
                    Primitive::Dot => self.dot(a, operands[1]),
                    Primitive::Max => self.max(a, operands[1]),
                    Primitive::Scale(c) => self.scale(a, c),
                    Primitive::Neg => self.neg(a),
                    Primitive::Sum => self.sum(a),
                    Primitive::Sin => self.sin(a),
                    Primitive::Cos => self.cos(a),
                    Primitive::Exp => self.exp(a),
                    Primitive::Log => self.log(a),
                    Primitive::Tanh => self.tanh(a),
                    Primitive::Softplus => self.softplus(a),
                    Primitive::Sigmoid => self.sigmoid(a),
                    Primitive::Square => self.square(a),
                    Primitive::Power(p) => self.powf(a, p),
                    Primitive::Slice { start, len } => self.slice(a, start, len),
                    Primitive::Transpose => self.transpose(a),
                    Primitive::Reshape(ref s) => self.reshape(a, s),
                    Primitive::Concat => unreachable!(),
                }
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        mk: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Res {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if !same_or_scalar(self.val(ia), self.val(ib)) {
            return Err(self.mismatch(name, &[ia, ib]));
        }
        let v = broadcast_binary(self.val(ia), self.val(ib), f);
        Ok(self.push(mk(ia, ib), v))
    }

    fn unary(&mut self, a: Var, mk: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Res {
        let ia = self.check(a)?;
        let v = self.val(ia).map(f);
        Ok(self.push(mk(ia), v))
    }

    /// Elementwise sum; either operand may be a single element that broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Res {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(self.mismatch("max", &[ia, ib]));
        }
        let v = self.val(ia).zip_map(self.val(ib), f64::max);
        Ok(self.push(Op::Max(ia, ib), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Res {
        self.unary(a, |i| Op::Scale(i, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Res {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn sin(&mut self, a: Var) -> Res {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Res {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Res {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Res {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Res {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Res {
        let ia = self.check(a)?;
        let x = self.val(ia);
        let mut value = vec![0.0; x.numel()];
        let mut slope = vec![0.0; x.numel()];
        for ((&v, p), s) in x.data().iter().zip(value.iter_mut()).zip(slope.iter_mut()) {
            (*p, *s) = softplus_with_slope(v);
        }
        let shape = x.shape().to_vec();
        let out = self.push(Op::Softplus(ia), Tensor::new(shape.clone(), value));
        self.nodes[out.id].aux = Some(Aux::Slope(Tensor::new(shape, slope)));
        Ok(out)
    }

    fn softplus_slope(&mut self, i: usize, a: usize) -> Res {
        let s = match self.nodes[i].aux.take() {
            Some(Aux::Slope(t)) => self.push(Op::Sigmoid(a), t),
            Some(Aux::Node(id)) => Var { id, tape: self.id },
            None => self.sigmoid(Var { id: a, tape: self.id })?,
        };
        self.nodes[i].aux = Some(Aux::Node(s.id));
        Ok(s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Res {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Res {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Res {
        self.unary(a, |i| Op::Power(i, p), |x| x.powf(p))
    }

    pub fn rehu(&mut self, a: Var, delta: f64) -> Res {
        if !(delta > 0.0) {
            return Err(AdError::InvalidArgument(format!("rehu delta must be positive, got {delta}")));
        }
        self.unary(a, |i| Op::Rehu(i, delta), |x| rehu(x, delta))
    }

    fn rehu_slope(&mut self, a: Var, delta: f64) -> Res {
        self.unary(a, |i| Op::RehuSlope(i, delta), |x| rehu_slope(x, delta))
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(self.mismatch("matmul", &[ia, ib]));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let v = Tensor::matrix(m, n, gemm(m, k, n, ta.data(), tb.data()));
        Ok(self.push(Op::MatMul(ia, ib), v))
    }

    /// Matrix (m×k) times vector (k) giving a vector (m).
    pub fn matvec(&mut self, a: Var, x: Var) -> Res {
        let (ia, ix) = (self.check(a)?, self.check(x)?);
        let (ta, tx) = (self.val(ia), self.val(ix));
        if ta.rank() != 2 || tx.rank() != 1 || ta.cols() != tx.numel() {
            return Err(self.mismatch("matvec", &[ia, ix]));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let v = Tensor::vector(&gemm(m, k, 1, ta.data(), tx.data()));
        Ok(self.push(Op::MatVec(ia, ix), v))
    }

    /// Full contraction of two same-shaped nodes to a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Res {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(self.mismatch("dot", &[ia, ib]));
        }
        let s: f64 = self.val(ia).data().iter().zip(self.val(ib).data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(ia, ib), Tensor::scalar(s)))
    }

    pub fn sum(&mut self, a: Var) -> Res {
        let ia = self.check(a)?;
        let s: f64 = self.val(ia).data().iter().sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s)))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Res {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Res {
        let ia = self.check(a)?;
        if self.val(ia).numel() != 1 {
            return Err(self.mismatch("broadcast", &[ia]));
        }
        let v = Tensor::filled(shape, self.val(ia).item());
        Ok(self.push(Op::Broadcast(ia), v))
    }

    pub fn transpose(&mut self, a: Var) -> Res {
        let ia = self.check(a)?;
        if self.val(ia).rank() != 2 {
            return Err(self.mismatch("transpose", &[ia]));
        }
        let v = self.val(ia).transpose();
        Ok(self.push(Op::Transpose(ia), v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        let ia = self.check(a)?;
        if shape.len() > 2 || shape.iter().product::<usize>() != self.val(ia).numel() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape_of(ia), ShapeDisplay(shape.to_vec())],
            });
        }
        if self.val(ia).shape() == shape {
            return Ok(a);
        }
        let v = self.val(ia).clone().reshaped(shape);
        Ok(self.push(Op::Reshape(ia), v))
    }

    /// Concatenate along the last axis (vectors end to end, matrices column-wise).
    pub fn concat(&mut self, parts: &[Var]) -> Res {
        if parts.is_empty() {
            return Err(AdError::Arity { expected: 1, got: 0 });
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_, _>>()?;
        let first = self.val(ids[0]);
        let rank = first.rank();
        let rows = first.rows();
        let ok = rank >= 1
            && ids.iter().all(|&i| self.val(i).rank() == rank && self.val(i).rows() == rows);
        if !ok {
            return Err(self.mismatch("concat", &ids));
        }
        let total: usize = ids.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let v = Tensor::new(shape, data);
        Ok(self.push(Op::Concat(ids.into()), v))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Res {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if t.rank() == 0 || start + len > t.cols() {
            return Err(AdError::ShapeMismatch {
                op: "slice",
                shapes: vec![self.shape_of(ia), ShapeDisplay(vec![start, len])],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let shape = if t.rank() == 1 { vec![len] } else { vec![rows, len] };
        let v = Tensor::new(shape, data);
        Ok(self.push(Op::Slice { src: ia, start }, v))
    }

    fn pad(&mut self, a: Var, start: usize, total: usize) -> Res {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let (rows, len) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            data[r * total + start..r * total + start + len].copy_from_slice(t.row(r));
        }
        let shape = if t.rank() == 1 { vec![total] } else { vec![rows, total] };
        let v = Tensor::new(shape, data);
        Ok(self.push(Op::Pad { src: ia, start }, v))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Res {
        let (im, ir) = (self.check(m)?, self.check(row)?);
        let (tm, tr) = (self.val(im), self.val(ir));
        if tm.rank() != 2 || tr.rank() != 2 || tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(self.mismatch("add_row", &[im, ir]));
        }
        let c = tm.cols();
        let mut data = tm.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let v = Tensor::matrix(tm.rows(), c, data);
        Ok(self.push(Op::AddRow(im, ir), v))
    }

    /// Column sums of an `r×c` matrix as a `1×c` row.
    pub fn sum_rows(&mut self, m: Var) -> Res {
        let im = self.check(m)?;
        let t = self.val(im);
        if t.rank() != 2 {
            return Err(self.mismatch("sum_rows", &[im]));
        }
        let c = t.cols();
        let mut out = vec![0.0; c];
        for r in 0..t.rows() {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let v = Tensor::matrix(1, c, out);
        Ok(self.push(Op::SumRows(im), v))
    }

    fn broadcast_rows(&mut self, row: Var, rows: usize) -> Res {
        let ir = self.check(row)?;
        let t = self.val(ir);
        let c = t.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, c, data);
        Ok(self.push(Op::BroadcastRows(ir), v))
    }

    /// Selects rows `idx` of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, m: Var, idx: Rc<[usize]>) -> Res {
        let im = self.check(m)?;
        let t = self.val(im);
        if t.rank() != 2 || idx.iter().any(|&i| i >= t.rows()) {
            return Err(self.mismatch("gather_rows", &[im]));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(idx.len(), c, data);
        Ok(self.push(Op::GatherRows(im, idx), v))
    }

    fn scatter_rows(&mut self, m: Var, idx: Rc<[usize]>, rows: usize) -> Res {
        let im = self.check(m)?;
        let t = self.val(im);
        let c = t.cols();
        let mut data = vec![0.0; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(t.row(k)) {
                *o += x;
            }
        }
        let v = Tensor::matrix(rows, c, data);
        Ok(self.push(Op::ScatterRows(im, idx), v))
    }

    /// Row sums of an `r×c` matrix as an `r×1` column.
    pub fn row_sums(&mut self, m: Var) -> Res {
        let c = self.value(m).cols();
        let ones = self.constant(Tensor::filled(&[c, 1], 1.0));
        self.matmul(m, ones)
    }

    fn unbroadcast(&mut self, g: usize, target: usize) -> Result<usize, AdError> {
        if self.val(g).shape() == self.val(target).shape() {
            return Ok(g);
        }
        let gv = Var { id: g, tape: self.id };
        let s = self.sum(gv)?;
        let shape = self.val(target).shape().to_vec();
        Ok(self.reshape(s, &shape)?.id)
    }

    /// Vector-Jacobian products of node `i` given its adjoint `g`, restricted
    /// to operands flagged in `needed`.
    fn vjp(&mut self, i: usize, g: usize, needed: &[bool]) -> Result<Vec<(usize, usize)>, AdError> {
        let op = self.nodes[i].op.clone();
        let tid = self.id;
        let v = |id: usize| Var { id, tape: tid };
        let gv = v(g);
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needed[a] {
                    out.push((a, self.unbroadcast(g, a)?));
                }
                if needed[b] {
                    out.push((b, self.unbroadcast(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    out.push((a, self.unbroadcast(g, a)?));
                }
                if needed[b] {
                    let n = self.neg(gv)?;
                    out.push((b, self.unbroadcast(n.id, b)?));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    let p = self.mul(gv, v(b))?;
                    out.push((a, self.unbroadcast(p.id, a)?));
                }
                if needed[b] {
                    let p = self.mul(gv, v(a))?;
                    out.push((b, self.unbroadcast(p.id, b)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(gv, c)?.id)),
            Op::Neg(a) => out.push((a, self.neg(gv)?.id)),
            Op::MatMul(a, b) => {
                if needed[a] {
                    let bt = self.transpose(v(b))?;
                    out.push((a, self.matmul(gv, bt)?.id));
                }
                if needed[b] {
                    let at = self.transpose(v(a))?;
                    out.push((b, self.matmul(at, gv)?.id));
                }
            }
            Op::MatVec(a, x) => {
                if needed[a] {
                    let (m, k) = (self.val(a).rows(), self.val(a).cols());
                    let gc = self.reshape(gv, &[m, 1])?;
                    let xr = self.reshape(v(x), &[1, k])?;
                    out.push((a, self.matmul(gc, xr)?.id));
                }
                if needed[x] {
                    let at = self.transpose(v(a))?;
                    out.push((x, self.matvec(at, gv)?.id));
                }
            }
            Op::Dot(a, b) => {
                if needed[a] {
                    out.push((a, self.mul(v(b), gv)?.id));
                }
                if needed[b] {
                    out.push((b, self.mul(v(a), gv)?.id));
                }
            }
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.broadcast_to(gv, &shape)?.id));
            }
            Op::Broadcast(a) => {
                let s = self.sum(gv)?;
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.reshape(s, &shape)?.id));
            }
            Op::Transpose(a) => out.push((a, self.transpose(gv)?.id)),
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.reshape(gv, &shape)?.id));
            }
            Op::Sin(a) => {
                let c = self.cos(v(a))?;
                out.push((a, self.mul(gv, c)?.id));
            }
            Op::Cos(a) => {
                let s = self.sin(v(a))?;
                let p = self.mul(gv, s)?;
                out.push((a, self.neg(p)?.id));
            }
            Op::Exp(a) => out.push((a, self.mul(gv, v(i))?.id)),
            Op::Log(a) => {
                let r = self.powf(v(a), -1.0)?;
                out.push((a, self.mul(gv, r)?.id));
            }
            Op::Tanh(a) => {
                let sq = self.square(v(i))?;
                let t = self.mul(gv, sq)?;
                out.push((a, self.sub(gv, t)?.id));
            }
            Op::Softplus(a) => {
                let s = self.softplus_slope(i, a)?;
                out.push((a, self.mul(gv, s)?.id));
            }
            Op::Sigmoid(a) => {
                let sq = self.square(v(i))?;
                let d = self.sub(v(i), sq)?;
                out.push((a, self.mul(gv, d)?.id));
            }
            Op::Square(a) => {
                let two_a = self.scale(v(a), 2.0)?;
                out.push((a, self.mul(gv, two_a)?.id));
            }
            Op::Power(a, p) => {
                if p == 1.0 {
                    out.push((a, g));
                } else if p != 0.0 {
                    let d = self.powf(v(a), p - 1.0)?;
                    let d = self.scale(d, p)?;
                    out.push((a, self.mul(gv, d)?.id));
                }
            }
            Op::Max(a, b) => {
                let mask_a = self.val(a).zip_map(self.val(b), |x, y| if x >= y { 1.0 } else { 0.0 });
                let mask_b = mask_a.map(|m| 1.0 - m);
                if needed[a] {
                    let m = self.constant(mask_a);
                    out.push((a, self.mul(gv, m)?.id));
                }
                if needed[b] {
                    let m = self.constant(mask_b);
                    out.push((b, self.mul(gv, m)?.id));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let len = self.val(p).cols();
                    if needed[p] {
                        out.push((p, self.slice(gv, off, len)?.id));
                    }
                    off += len;
                }
            }
            Op::Slice { src, start } => {
                let total = self.val(src).cols();
                out.push((src, self.pad(gv, start, total)?.id));
            }
            Op::Pad { src, start } => {
                let len = self.val(src).cols();
                out.push((src, self.slice(gv, start, len)?.id));
            }
            Op::AddRow(m, r) => {
                if needed[m] {
                    out.push((m, g));
                }
                if needed[r] {
                    out.push((r, self.sum_rows(gv)?.id));
                }
            }
            Op::SumRows(m) => {
                let rows = self.val(m).rows();
                out.push((m, self.broadcast_rows(gv, rows)?.id));
            }
            Op::BroadcastRows(r) => out.push((r, self.sum_rows(gv)?.id)),
            Op::GatherRows(m, idx) => {
                let rows = self.val(m).rows();
                out.push((m, self.scatter_rows(gv, idx, rows)?.id));
            }
            Op::ScatterRows(m, idx) => out.push((m, self.gather_rows(gv, idx)?.id)),
            Op::Rehu(a, d) => {
                let s = self.rehu_slope(v(a), d)?;
                out.push((a, self.mul(gv, s)?.id));
            }
            Op::RehuSlope(a, d) => {
                let mask = self.val(a).map(|x| if x > 0.0 && x < d { 1.0 / d } else { 0.0 });
                let m = self.constant(mask);
                out.push((a, self.mul(gv, m)?.id));
            }
        }
        Ok(out)
    }

    /// Gradients of scalar `root` with respect to `wrt`, recorded as new
    /// nodes on this tape so they can be differentiated again.
    ///
    /// Nodes listed in `hold` are treated as constants: adjoints are not
    /// propagated through them, although they still appear as operands in
    /// the emitted gradient graph.
    pub fn grad_graph(&mut self, root: Var, wrt: &[Var], hold: &[Var]) -> Result<Vec<Var>, AdError> {
        let r = self.check(root)?;
        if self.val(r).numel() != 1 {
            return Err(AdError::NonScalarRoot { shape: self.shape_of(r) });
        }
        let mut is_wrt = vec![false; r + 1];
        let mut wrt_ids = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let i = self.check(w)?;
            if i <= r {
                is_wrt[i] = true;
            }
            wrt_ids.push(i);
        }
        let mut held = vec![false; r + 1];
        for &h in hold {
            let i = self.check(h)?;
            if i <= r {
                held[i] = true;
            }
        }
        let mut needed = vec![false; r + 1];
        for i in 0..=r {
            needed[i] = is_wrt[i] || (!held[i] && self.nodes[i].op.operands().any(|o| needed[o]));
        }
        let mut adj: Vec<Option<usize>> = vec![None; r + 1];
        if needed[r] {
            let shape = self.val(r).shape().to_vec();
            adj[r] = Some(self.constant(Tensor::filled(&shape, 1.0)).id);
        }
        for i in (0..=r).rev() {
            let Some(g) = adj[i] else { continue };
            if held[i] && !is_wrt[i] {
                continue;
            }
            for (o, contrib) in self.vjp(i, g, &needed)? {
                adj[o] = Some(match adj[o] {
                    None => contrib,
                    Some(prev) => {
                        let tid = self.id;
                        self.add(Var { id: prev, tape: tid }, Var { id: contrib, tape: tid })?.id
                    }
                });
            }
        }
        let mut grads = Vec::with_capacity(wrt_ids.len());
        for &w in &wrt_ids {
            let g = match adj.get(w).copied().flatten() {
                Some(g) => Var { id: g, tape: self.id },
                None => {
                    let shape = self.val(w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            grads.push(g);
        }
        Ok(grads)
    }

    /// Numeric gradients of scalar `root`; leaves the tape as it was.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        let mark = self.nodes.len();
        let res = self
            .grad_graph(root, wrt, &[])
            .map(|gs| gs.iter().map(|&g| self.value(g).clone()).collect());
        self.truncate(mark);
        res
    }

    fn truncate(&mut self, mark: usize) {
        for i in 0..mark {
            if let Some(Aux::Node(id)) = self.nodes[i].aux {
                if id >= mark {
                    let t = std::mem::replace(&mut self.nodes[id].value, Tensor::scalar(0.0));
                    self.nodes[i].aux = Some(Aux::Slope(t));
                }
            }
        }
        self.nodes.truncate(mark);
    }
}

use std::sync::atomic::{AtomicU32, Ordering};

use super::math::{log_softmax_row, sigmoid, softmax_row, softplus};
use super::Tensor;
use crate::error::{domain_err, shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Every differentiable operation the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst(f64),
    MulScalar,
    SubScalar,
    Recip,
    MatMul,
    Affine,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    Concat,
    Slice { start: usize, len: usize },
    Row(usize),
    Sum,
    Mean,
    Max,
    ReluHinge,
    Dot,
    StraightThrough,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddConst(_) => "add_const",
            OpKind::MulScalar => "mul_scalar",
            OpKind::SubScalar => "sub_scalar",
            OpKind::Recip => "recip",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Row(_) => "row",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::ReluHinge => "relu_hinge",
            OpKind::Dot => "dot",
            OpKind::StraightThrough => "straight_through",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar(usize, usize),
    SubScalar(usize, usize),
    Recip(usize),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Row(usize, usize),
    Sum(usize),
    Mean(usize),
    Max(usize, usize),
    ReluHinge(usize),
    Dot(usize, usize),
    StraightThrough(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::SubScalar(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Affine(a, b, c) => vec![*a, *b, *c],
            Op::Concat(v) => v.clone(),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Max(a, _)
            | Op::ReluHinge(a)
            | Op::StraightThrough(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order; `backward` walks them in exact
/// reverse order. A tape is not `Sync`-shared: build one per unit of work.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-major product of an (m, k) block with a (k, n) block.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Shapes of a matmul operand pair as (m, k, n, output shape).
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([k], [k2, n]) if k == k2 => Some((1, *k, *n, vec![*n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx as usize)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i])
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign var")].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.value(v).values()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).values()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok((ia, ib))
    }

    fn scalar_operand(&self, op: &'static str, s: Var) -> Result<usize> {
        let i = self.idx(s)?;
        if self.nodes[i].value.len() != 1 {
            return shape_err(
                op,
                format!("scalar operand has shape {:?}", self.nodes[i].value.shape()),
            );
        }
        Ok(i)
    }

    fn map_unary(&self, a: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[a].value;
        Tensor::new(
            t.shape().to_vec(),
            t.values().iter().map(|&x| f(x)).collect(),
        )
        .expect("shape preserved")
    }

    /// Dispatches by kind. Ops with configuration carry it in the kind.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return shape_err(
                    kind.name(),
                    format!("expects {n} inputs, got {}", inputs.len()),
                );
            }
            Ok(())
        };
        match kind {
            OpKind::Concat => {
                if inputs.is_empty() {
                    return shape_err("concat", "no inputs");
                }
                return self.concat(inputs);
            }
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MulScalar
            | OpKind::SubScalar
            | OpKind::MatMul
            | OpKind::Dot => arity(2)?,
            OpKind::Affine => arity(3)?,
            _ => arity(1)?,
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Scale(c) => self.scale(a, c),
            OpKind::AddConst(c) => self.add_const(a, c),
            OpKind::MulScalar => self.mul_scalar(a, inputs[1]),
            OpKind::SubScalar => self.sub_scalar(a, inputs[1]),
            OpKind::Recip => self.recip(a),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Affine => self.affine(a, inputs[1], inputs[2]),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Tanh => self.tanh(a),
            OpKind::Softplus => self.softplus(a),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::SoftmaxRows => self.softmax_rows(a),
            OpKind::LogSoftmaxRows => self.log_softmax_rows(a),
            OpKind::Slice { start, len } => self.slice(a, start, len),
            OpKind::Row(i) => self.row(a, i),
            OpKind::Sum => self.sum(a),
            OpKind::Mean => self.mean(a),
            OpKind::Max => self.max(a),
            OpKind::ReluHinge => self.relu_hinge(a),
            OpKind::Dot => self.dot(a, inputs[1]),
            OpKind::StraightThrough => self.straight_through(a),
            OpKind::Concat => unreachable!(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let v = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), v)?;
        Ok(self.push(t, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let v = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), v)?;
        Ok(self.push(t, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("mul", a, b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let v = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), v)?;
        Ok(self.push(t, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, |x| c * x);
        Ok(self.push(t, Op::Scale(ia, c)))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, |x| x + c);
        Ok(self.push(t, Op::AddConst(ia)))
    }

    /// `s * a` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let is = self.scalar_operand("mul_scalar", s)?;
        let sv = self.nodes[is].value.values()[0];
        let t = self.map_unary(ia, |x| sv * x);
        Ok(self.push(t, Op::MulScalar(ia, is)))
    }

    /// `a - s` for a one-element `s`.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let is = self.scalar_operand("sub_scalar", s)?;
        let sv = self.nodes[is].value.values()[0];
        let t = self.map_unary(ia, |x| x - sv);
        Ok(self.push(t, Op::SubScalar(ia, is)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.values().contains(&0.0) {
            return domain_err("recip", "division by zero");
        }
        let t = self.map_unary(ia, |x| 1.0 / x);
        Ok(self.push(t, Op::Recip(ia)))
    }

    /// Matrix product. Accepts (m,k)x(k,n), (k)x(k,n) and (m,k)x(k).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let Some((m, k, n, shape)) = matmul_dims(ta.shape(), tb.shape()) else {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        };
        let v = gemm(ta.values(), tb.values(), m, k, n);
        let t = Tensor::new(shape, v)?;
        Ok(self.push(t, Op::MatMul(ia, ib)))
    }

    /// `x W + b` with x of shape (k) or (r,k), W (k,n), b (n).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (tx, tw, tb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let (rows, k, shape_of) = match tx.shape() {
            [k] => (1, *k, None),
            [r, k] => (*r, *k, Some(*r)),
            s => return shape_err("affine", format!("input of rank {}", s.len())),
        };
        let n = match tw.shape() {
            [k2, n] if *k2 == k => *n,
            s => {
                return shape_err(
                    "affine",
                    format!("input {:?} with weight {s:?}", tx.shape()),
                )
            }
        };
        if tb.shape() != [n] {
            return shape_err(
                "affine",
                format!("bias {:?} for output width {n}", tb.shape()),
            );
        }
        let mut v = gemm(tx.values(), tw.values(), rows, k, n);
        for r in 0..rows {
            for (o, &bv) in v[r * n..(r + 1) * n].iter_mut().zip(tb.values()) {
                *o += bv;
            }
        }
        let shape = match shape_of {
            None => vec![n],
            Some(r) => vec![r, n],
        };
        let t = Tensor::new(shape, v)?;
        Ok(self.push(t, Op::Affine(ix, iw, ib)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, sigmoid);
        Ok(self.push(t, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, f64::tanh);
        Ok(self.push(t, Op::Tanh(ia)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, softplus);
        Ok(self.push(t, Op::Softplus(ia)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, f64::exp);
        Ok(self.push(t, Op::Exp(ia)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(x) = self.nodes[ia]
            .value
            .values()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return domain_err("log", format!("non-positive argument {x}"));
        }
        let t = self.map_unary(ia, f64::ln);
        Ok(self.push(t, Op::Log(ia)))
    }

    fn rowwise(
        &mut self,
        name: &'static str,
        a: Var,
        f: fn(&[f64], &mut [f64]),
    ) -> Result<(usize, Tensor)> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let Some((_, cols)) = ta.as_rows() else {
            return shape_err(name, format!("needs rank 1 or 2, got {:?}", ta.shape()));
        };
        let mut out = vec![0.0; ta.len()];
        for (src, dst) in ta.values().chunks(cols).zip(out.chunks_mut(cols)) {
            f(src, dst);
        }
        Ok((ia, Tensor::new(ta.shape().to_vec(), out)?))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (ia, t) = self.rowwise("softmax_rows", a, softmax_row)?;
        Ok(self.push(t, Op::SoftmaxRows(ia)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (ia, t) = self.rowwise("log_softmax_rows", a, log_softmax_row)?;
        Ok(self.push(t, Op::LogSoftmaxRows(ia)))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut ids = Vec::with_capacity(parts.len());
        let mut v = Vec::new();
        for &p in parts {
            let i = self.idx(p)?;
            let t = &self.nodes[i].value;
            if t.rank() != 1 {
                return shape_err("concat", format!("part of shape {:?}", t.shape()));
            }
            v.extend_from_slice(t.values());
            ids.push(i);
        }
        if v.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let t = Tensor::vector(v);
        Ok(self.push(t, Op::Concat(ids)))
    }

    /// Contiguous range of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        if ta.rank() != 1 || len == 0 || start + len > ta.len() {
            return shape_err(
                "slice",
                format!("[{start}..{}] of shape {:?}", start + len, ta.shape()),
            );
        }
        let t = Tensor::vector(ta.values()[start..start + len].to_vec());
        Ok(self.push(t, Op::Slice(ia, start)))
    }

    /// Row `i` of a matrix as a rank-1 tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (r, c) = match ta.shape() {
            [r, c] => (*r, *c),
            s => return shape_err("row", format!("needs a matrix, got {s:?}")),
        };
        if i >= r {
            return shape_err("row", format!("row {i} of {r}"));
        }
        let t = Tensor::vector(ta.values()[i * c..(i + 1) * c].to_vec());
        Ok(self.push(t, Op::Row(ia, i)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let s: f64 = t.values().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ia)))
    }

    /// Largest element; the gradient goes to the lowest maximizing index.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let vals = self.nodes[ia].value.values();
        let k = argmax(vals);
        let m = vals[k];
        Ok(self.push(Tensor::scalar(m), Op::Max(ia, k)))
    }

    /// `max(0, x)` elementwise, with subgradient 0 at the kink.
    pub fn relu_hinge(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.map_unary(ia, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        Ok(self.push(t, Op::ReluHinge(ia)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("dot", a, b)?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 1 {
            return shape_err("dot", format!("needs vectors, got {:?}", ta.shape()));
        }
        let s = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(ia, ib)))
    }

    /// One-hot of the argmax in the forward pass; identity Jacobian in the
    /// backward pass.
    pub fn straight_through(&mut self, relaxed: Var) -> Result<Var> {
        let ia = self.idx(relaxed)?;
        let t = &self.nodes[ia].value;
        if t.rank() != 1 {
            return shape_err(
                "straight_through",
                format!("needs a vector, got {:?}", t.shape()),
            );
        }
        let vals = t.values();
        let total: f64 = vals.iter().sum();
        if vals.iter().any(|&x| x.is_nan() || x < 0.0) || (total - 1.0).abs() > 1e-9 {
            return domain_err(
                "straight_through",
                format!("not a probability vector (sum {total})"),
            );
        }
        let out = Tensor::one_hot(vals.len(), argmax(vals));
        Ok(self.push(out, Op::StraightThrough(ia)))
    }

    /// Reverse pass from a scalar `loss`. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        let lt = &self.nodes[li].value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(buf);
            }
        };
        let out = nodes[i].value.values();
        let val = |j: usize| nodes[j].value.values();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d)
                });
            }
            Op::AddConst(a) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                let va = val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += sv * d)
                });
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(va).map(|(d, x)| d * x).sum::<f64>();
                });
            }
            Op::SubScalar(a, s) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
                acc(*s, &mut |gs| gs[0] -= g.iter().sum::<f64>());
            }
            Op::Recip(a) => {
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] -= g[k] * out[k] * out[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n, _) = matmul_dims(sa, sb).expect("checked in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va[r * k + p];
                            for (x, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *x += av * d;
                            }
                        }
                    }
                });
            }
            Op::Affine(x, w, b) => {
                let tw = &nodes[*w].value;
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = nodes[*x].value.len() / k;
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let wrow = &vw[p * n..(p + 1) * n];
                            gx[r * k + p] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let xv = vx[r * k + p];
                            for (a, &d) in gw[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *a += xv * d;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for (a, &d) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *a += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * sigmoid(va[k]);
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / va[k];
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let cols = nodes[i].value.as_rows().expect("checked").1;
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_mut(cols)
                        .zip(out.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let s: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for k in 0..cols {
                            gr[k] += yr[k] * (dr[k] - s);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a) => {
                let cols = nodes[i].value.as_rows().expect("checked").1;
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_mut(cols)
                        .zip(out.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let s: f64 = dr.iter().sum();
                        for k in 0..cols {
                            gr[k] += dr[k] - yr[k].exp() * s;
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    let seg = &g[off..off + n];
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(seg).for_each(|(x, d)| *x += d)
                    });
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let s = *start;
                acc(*a, &mut |ga| {
                    for (x, d) in ga[s..s + g.len()].iter_mut().zip(g) {
                        *x += d;
                    }
                })
            }
            Op::Row(a, r) => {
                let c = g.len();
                let r = *r;
                acc(*a, &mut |ga| {
                    for (x, d) in ga[r * c..(r + 1) * c].iter_mut().zip(g) {
                        *x += d;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Max(a, k) => acc(*a, &mut |ga| ga[*k] += g[0]),
            Op::ReluHinge(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                })
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[0] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[0] * va[k];
                    }
                });
            }
            Op::StraightThrough(a) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
            }
        }
    }
}

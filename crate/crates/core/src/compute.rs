//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order since
//! a node can only reference nodes created before it. Values of interior nodes
//! are released as soon as their gradient has been propagated, so peak memory
//! during backward stays close to the forward footprint.
//!
//! Broadcasting is limited to a single-element operand against a tensor of any
//! shape. Row broadcasts (biases, per-unit vectors) have dedicated ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major `[rows × cols]` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Placeholder for values dropped during backward; never read again.
    fn released() -> Self {
        Self {
            shape: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n] => Ok((1, n)),
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidTensor(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Neg,
    Square,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
        }
    }

    /// Local derivative from the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Neg => -1.0,
            UnaryOp::Square => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    AddBias(usize, usize),
    BroadcastRows(usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Reduce(Reduction, usize),
    /// Per row, the activations `i, f, g, o, tanh(c)` saved for backward.
    LstmGates {
        pre: usize,
        c_prev: usize,
        saved: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph. Confined to one thread; build one per loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Same value, no parents, excluded from backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| op.apply(x));
        let rg = self.rg(a.0);
        self.push(value, Op::Unary(op, a.0), rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape == vb.shape {
            let data = va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| op.apply(x, y))
                .collect();
            Tensor {
                shape: va.shape.clone(),
                data,
            }
        } else if vb.len() == 1 {
            let y = vb.data[0];
            va.map(|x| op.apply(x, y))
        } else if va.len() == 1 {
            let x = va.data[0];
            vb.map(|y| op.apply(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Binary(op, a.0, b.0), rg))
    }

    /// Elementwise op; `b` is required for binary ops and ignored otherwise.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match op {
            Elementwise::Unary(u) => Ok(self.unary(u, a)),
            Elementwise::Binary(bop) => {
                let b = b.ok_or_else(|| {
                    Error::InvalidTensor(format!("{} needs two operands", bop.name()))
                })?;
                self.binary(bop, a, b)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = self.scalar(c);
        self.mul(a, k).expect("scalar broadcast")
    }

    /// `c - a` for a constant `c`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let k = self.scalar(c);
        self.sub(k, a).expect("scalar broadcast")
    }

    /// `[n×k] · [k×m] → [n×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[n×k] · [m×k]ᵀ → [n×m]`, the layout used for `x · Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (n, k) = va.dims2()?;
        let (br, bc) = vb.dims2()?;
        let (bk, m) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm(va, false, vb, trans_b, &mut out, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    /// Adds a length-`m` bias to every row of an `[n×m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[bias.0].value;
        let (_, m) = va.dims2()?;
        if vb.len() != m {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let mut value = va.clone();
        for row in value.data.chunks_mut(m) {
            for (x, &b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(bias.0);
        Ok(self.push(value, Op::AddBias(a.0, bias.0), rg))
    }

    /// Stacks `rows` copies of a vector into a `[rows×m]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let m = va.len();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(&va.data);
        }
        let rg = self.rg(a.0);
        self.push(
            Tensor {
                shape: vec![rows, m],
                data,
            },
            Op::BroadcastRows(a.0),
            rg,
        )
    }

    /// Columns `start..start + len` of an `[n×m]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (n, m) = va.dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: va.shape.clone(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for row in va.data.chunks(m) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor {
                shape: vec![n, len],
                data,
            },
            Op::SliceCols { a: a.0, start },
            rg,
        ))
    }

    /// Rows `start..start + len` of an `[n×m]` matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (n, m) = va.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: va.shape.clone(),
                right: vec![start, len],
            });
        }
        let data = va.data[start * m..(start + len) * m].to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor {
                shape: vec![len, m],
                data,
            },
            Op::SliceRows { a: a.0, start },
            rg,
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_rows of nothing".into()))?;
        let (_, m) = self.nodes[first.0].value.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = v.dims2()?;
            if c != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[first.0].value.shape.clone(),
                    right: v.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&v.data);
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Tensor {
                shape: vec![rows, m],
                data,
            },
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn reduce(&mut self, op: Reduction, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s: f64 = va.data.iter().sum();
        let v = match op {
            Reduction::Sum => s,
            Reduction::Mean => s / va.len() as f64,
        };
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(v), Op::Reduce(op, a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a)
    }

    /// LSTM gate nonlinearities and state update as one node.
    ///
    /// `pre` is `[B×4H]` with blocks `i, f, g, o`; `c_prev` is `[B×H]`. The
    /// result is `[B×2H]` holding `h = o ⊙ tanh(c)` in the first `H` columns
    /// and `c = f ⊙ c_prev + i ⊙ g` in the last `H`.
    pub fn lstm_gates(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let vp = &self.nodes[pre.0].value;
        let vc = &self.nodes[c_prev.0].value;
        let (b, four_h) = vp.dims2()?;
        let (cb, h) = vc.dims2()?;
        if four_h != 4 * h || cb != b {
            return Err(Error::ShapeMismatch {
                op: "lstm_gates",
                left: vp.shape.clone(),
                right: vc.shape.clone(),
            });
        }
        let mut out = vec![0.0; b * 2 * h];
        let mut saved = vec![0.0; b * 5 * h];
        for r in 0..b {
            let p = &vp.data[r * 4 * h..(r + 1) * 4 * h];
            let cp = &vc.data[r * h..(r + 1) * h];
            let o_row = &mut out[r * 2 * h..(r + 1) * 2 * h];
            let s_row = &mut saved[r * 5 * h..(r + 1) * 5 * h];
            for k in 0..h {
                let i = sigmoid(p[k]);
                let f = sigmoid(p[h + k]);
                let g = p[2 * h + k].tanh();
                let o = sigmoid(p[3 * h + k]);
                let c = f * cp[k] + i * g;
                let tc = c.tanh();
                o_row[k] = o * tc;
                o_row[h + k] = c;
                s_row[k] = i;
                s_row[h + k] = f;
                s_row[2 * h + k] = g;
                s_row[3 * h + k] = o;
                s_row[4 * h + k] = tc;
            }
        }
        let rg = self.rg(pre.0) || self.rg(c_prev.0);
        Ok(self.push(
            Tensor {
                shape: vec![b, 2 * h],
                data: out,
            },
            Op::LstmGates {
                pre: pre.0,
                c_prev: c_prev.0,
                saved,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    ///
    /// Returns a gradient for every leaf; leaves the loss does not depend on
    /// get zeros. Multiple uses of a node accumulate additively.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let mut nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape.clone()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(&node.value.shape));
            }
        }
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&nodes[loss.0].value.shape, 1.0));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                if !matches!(nodes[i].op, Op::Leaf) {
                    nodes[i].value = Tensor::released();
                }
                continue;
            };
            let (done, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(node, &g, done, &mut grads, &mut leaves, i);
            nodes[i].value = Tensor::released();
            nodes[i].op = Op::Constant;
        }

        Ok(Gradients { grads: leaves })
    }
}

/// Elementwise op selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

fn accumulate<'a>(
    grads: &'a mut [Option<Tensor>],
    idx: usize,
    shape: &[usize],
) -> &'a mut [f64] {
    grads[idx]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data
        .as_mut_slice()
}

fn propagate(
    node: &Node,
    g: &Tensor,
    parents: &[Node],
    grads: &mut [Option<Tensor>],
    leaves: &mut [Option<Tensor>],
    idx: usize,
) {
    match &node.op {
        Op::Constant => {}
        Op::Leaf => {
            let slot = leaves[idx].as_mut().expect("leaf slot");
            for (s, &v) in slot.data.iter_mut().zip(&g.data) {
                *s += v;
            }
        }
        &Op::Unary(op, a) => {
            if !parents[a].requires_grad {
                return;
            }
            let x = &parents[a].value;
            let y = &node.value;
            let ga = accumulate(grads, a, &x.shape);
            for k in 0..g.data.len() {
                ga[k] += g.data[k] * op.derivative(x.data[k], y.data[k]);
            }
        }
        &Op::Binary(op, a, b) if parents[a].value.shape == parents[b].value.shape => {
            let va = &parents[a].value.data;
            let vb = &parents[b].value.data;
            let shape = &parents[a].value.shape;
            let gd = &g.data;
            if parents[a].requires_grad {
                let ga = accumulate(grads, a, shape);
                match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        ga.iter_mut().zip(gd).for_each(|(s, v)| *s += v);
                    }
                    BinaryOp::Mul => {
                        for k in 0..gd.len() {
                            ga[k] += gd[k] * vb[k];
                        }
                    }
                    BinaryOp::Div => {
                        for k in 0..gd.len() {
                            ga[k] += gd[k] / vb[k];
                        }
                    }
                }
            }
            if parents[b].requires_grad {
                let gb = accumulate(grads, b, shape);
                for k in 0..gd.len() {
                    gb[k] += gd[k] * op.partials(va[k], vb[k]).1;
                }
            }
        }
        &Op::Binary(op, a, b) => {
            let va = &parents[a].value;
            let vb = &parents[b].value;
            let n = g.data.len();
            let a_bc = va.len() == 1 && n != 1;
            let b_bc = vb.len() == 1 && n != 1;
            let mut da = vec![0.0; if a_bc { 1 } else { n }];
            let mut db = vec![0.0; if b_bc { 1 } else { n }];
            for k in 0..n {
                let x = va.data[if a_bc { 0 } else { k }];
                let y = vb.data[if b_bc { 0 } else { k }];
                let (pa, pb) = op.partials(x, y);
                da[if a_bc { 0 } else { k }] += g.data[k] * pa;
                db[if b_bc { 0 } else { k }] += g.data[k] * pb;
            }
            if parents[a].requires_grad {
                let ga = accumulate(grads, a, &va.shape);
                ga.iter_mut().zip(&da).for_each(|(s, v)| *s += v);
            }
            if parents[b].requires_grad {
                let gb = accumulate(grads, b, &vb.shape);
                gb.iter_mut().zip(&db).for_each(|(s, v)| *s += v);
            }
        }
        &Op::MatMul { a, b, trans_b } => {
            let va = &parents[a].value;
            let vb = &parents[b].value;
            if parents[a].requires_grad {
                // C = A·B → dA = G·Bᵀ;  C = A·Bᵀ → dA = G·B
                let ga = accumulate(grads, a, &va.shape);
                gemm(g, false, vb, !trans_b, ga, true);
            }
            if parents[b].requires_grad {
                let gb = accumulate(grads, b, &vb.shape);
                if trans_b {
                    // dB = Gᵀ·A
                    gemm(g, true, va, false, gb, true);
                } else {
                    // dB = Aᵀ·G
                    gemm(va, true, g, false, gb, true);
                }
            }
        }
        &Op::AddBias(a, bias) => {
            let m = parents[bias].value.len();
            if parents[a].requires_grad {
                let ga = accumulate(grads, a, &parents[a].value.shape);
                ga.iter_mut().zip(&g.data).for_each(|(s, v)| *s += v);
            }
            if parents[bias].requires_grad {
                let gb = accumulate(grads, bias, &parents[bias].value.shape);
                for row in g.data.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
            }
        }
        &Op::BroadcastRows(a) => {
            if parents[a].requires_grad {
                let m = parents[a].value.len();
                let ga = accumulate(grads, a, &parents[a].value.shape);
                for row in g.data.chunks(m) {
                    ga.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
            }
        }
        &Op::SliceCols { a, start } => {
            if parents[a].requires_grad {
                let len = node.value.shape[1];
                let m = parents[a].value.shape[1];
                let ga = accumulate(grads, a, &parents[a].value.shape);
                for (dst, src) in ga.chunks_mut(m).zip(g.data.chunks(len)) {
                    dst[start..start + len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(s, v)| *s += v);
                }
            }
        }
        &Op::SliceRows { a, start } => {
            if parents[a].requires_grad {
                let m = parents[a].value.shape[1];
                let ga = accumulate(grads, a, &parents[a].value.shape);
                ga[start * m..start * m + g.data.len()]
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(s, v)| *s += v);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = parents[p].value.len();
                if parents[p].requires_grad {
                    let gp = accumulate(grads, p, &parents[p].value.shape);
                    gp.iter_mut()
                        .zip(&g.data[offset..offset + n])
                        .for_each(|(s, v)| *s += v);
                }
                offset += n;
            }
        }
        Op::LstmGates { pre, c_prev, saved } => {
            let (pre, c_prev) = (*pre, *c_prev);
            let cp = &parents[c_prev].value.data;
            let (b, two_h) = (g.shape[0], g.shape[1]);
            let h = two_h / 2;
            let mut dpre = vec![0.0; b * 4 * h];
            let mut dcp = vec![0.0; b * h];
            for r in 0..b {
                let gr = &g.data[r * 2 * h..(r + 1) * 2 * h];
                let sv = &saved[r * 5 * h..(r + 1) * 5 * h];
                let dp = &mut dpre[r * 4 * h..(r + 1) * 4 * h];
                for k in 0..h {
                    let (i, f, gg, o, tc) = (sv[k], sv[h + k], sv[2 * h + k], sv[3 * h + k], sv[4 * h + k]);
                    let gh = gr[k];
                    let dc = gr[h + k] + gh * o * (1.0 - tc * tc);
                    dp[k] = dc * gg * i * (1.0 - i);
                    dp[h + k] = dc * cp[r * h + k] * f * (1.0 - f);
                    dp[2 * h + k] = dc * i * (1.0 - gg * gg);
                    dp[3 * h + k] = gh * tc * o * (1.0 - o);
                    dcp[r * h + k] = dc * f;
                }
            }
            if parents[pre].requires_grad {
                let ga = accumulate(grads, pre, &parents[pre].value.shape);
                ga.iter_mut().zip(&dpre).for_each(|(s, v)| *s += v);
            }
            if parents[c_prev].requires_grad {
                let gc = accumulate(grads, c_prev, &parents[c_prev].value.shape);
                gc.iter_mut().zip(&dcp).for_each(|(s, v)| *s += v);
            }
        }
        &Op::Reduce(op, a) => {
            if parents[a].requires_grad {
                let n = parents[a].value.len();
                let scale = match op {
                    Reduction::Sum => g.data[0],
                    Reduction::Mean => g.data[0] / n as f64,
                };
                let ga = accumulate(grads, a, &parents[a].value.shape);
                ga.iter_mut().for_each(|s| *s += scale);
            }
        }
    }
}

/// `out (+)= op(a) · op(b)` for 2-D tensors (1-D treated as a row).
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut [f64], accumulate: bool) {
    let (ar, ac) = a.dims2().expect("matrix");
    let (br, bc) = b.dims2().expect("matrix");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe in-bounds row-major views of `a`, `b` and `out`,
    // whose lengths were checked against the dimensions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of a loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

/// Smallest denominator used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares autodiff against central differences of step `step`.
///
/// Returns `max_k |ad_k − fd_k| / max(|ad_k|, |fd_k|, GRAD_CHECK_FLOOR)`. The
/// floor keeps near-zero components, where the difference quotient is mostly
/// rounding noise, from dominating. Only meaningful on graphs without
/// stop-gradient cuts; across a cut the two disagree by design.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(Error::NonScalarLoss(val.shape.clone()));
        }
        Ok(val.data[0])
    };
    let f0 = eval(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let ad = grads.get(v).expect("leaf gradient");

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + step;
        let fp = eval(&probe)?;
        probe.data[k] = orig - step;
        let fm = eval(&probe)?;
        probe.data[k] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (ad.data[k] - fd).abs() / fd.abs().max(ad.data[k].abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

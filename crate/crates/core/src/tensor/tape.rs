use std::fmt;

use super::kernels::{add_into, deconv_forward, gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family of a recorded node; used in diagnostics and by the
/// gradient-checking fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Relu,
    Softmax,
    MaxPool,
    Concat,
    Duplicate,
    Deconv,
    Gather,
    Add,
    Sub,
    Mul,
    SumNeighbors,
    Reshape,
    Scale,
    Sum,
    Custom,
}

impl OpKind {
    pub const fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::MaxPool => "max_pool_points",
            OpKind::Concat => "concat_channels",
            OpKind::Duplicate => "duplicate_points",
            OpKind::Deconv => "deconv1d_points",
            OpKind::Gather => "gather_rows",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::SumNeighbors => "sum_neighbors",
            OpKind::Reshape => "reshape",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        const ALL: [OpKind; 17] = [
            OpKind::Leaf,
            OpKind::Linear,
            OpKind::Relu,
            OpKind::Softmax,
            OpKind::MaxPool,
            OpKind::Concat,
            OpKind::Duplicate,
            OpKind::Deconv,
            OpKind::Gather,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::SumNeighbors,
            OpKind::Reshape,
            OpKind::Scale,
            OpKind::Sum,
            OpKind::Custom,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A differentiable operation implemented outside the tape (for example a
/// loss with its own correspondence search).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per input, `None` when the input
    /// receives nothing.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var, ca: usize, cb: usize },
    Duplicate { x: Var, r: usize },
    Deconv { x: Var, w: Var, b: Var, r: usize },
    Gather { x: Var, idx: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    SumNeighbors { x: Var, k: usize },
    Reshape { x: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Duplicate { .. } => OpKind::Duplicate,
            Op::Deconv { .. } => OpKind::Deconv,
            Op::Gather { .. } => OpKind::Gather,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::SumNeighbors { .. } => OpKind::SumNeighbors,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep that visits each node once.
/// Gradients from repeated [`Tape::backward`] calls accumulate until
/// [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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

    /// Test hook: scales every gradient produced by operations of `kind` by
    /// 1.5, so gradient checks have a negative control.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient, `None` if nothing reached this node yet.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor; zeros when nothing reached the node.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- operations ------------------------------------------------------

    /// Per-row affine map over the last axis: `out[.., j] = sum_i x[.., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[1]] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: ws.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / cin.max(1);
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(cout);

        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            cin,
            cout,
            View::rows(self.value(x).data(), cin),
            View::rows(self.value(w).data(), cout),
            &mut out,
            1.0,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, rg, Op::Relu { x })
    }

    /// Row-wise softmax of an `[N, K]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        if s[1] == 0 {
            return Err(Error::arg("softmax_rows needs at least one column"));
        }
        let (n, k) = (s[0], s[1]);
        Ok(self.softmax_axis(x, n, k, 1))
    }

    /// Softmax over the neighbor axis of an `[N, k, C]` tensor, independently
    /// per point and channel.
    pub fn softmax_neighbors(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Dimension {
                op: "softmax_neighbors",
                lhs: s.to_vec(),
                rhs: vec![0, 1, 0],
            });
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        Ok(self.softmax_axis(x, n, k, c))
    }

    fn softmax_axis(&mut self, x: Var, outer: usize, len: usize, inner: usize) -> Var {
        let v = self.value(x);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut maxes = vec![0.0; inner];
        let mut sums = vec![0.0; inner];
        for o in 0..outer {
            let base = o * len * inner;
            maxes.copy_from_slice(&src[base..base + inner]);
            for l in 1..len {
                let row = &src[base + l * inner..base + (l + 1) * inner];
                for (m, &a) in maxes.iter_mut().zip(row) {
                    if a > *m {
                        *m = a;
                    }
                }
            }
            sums.iter_mut().for_each(|s| *s = 0.0);
            for l in 0..len {
                let off = base + l * inner;
                for c in 0..inner {
                    let e = (src[off + c] - maxes[c]).exp();
                    out[off + c] = e;
                    sums[c] += e;
                }
            }
            for l in 0..len {
                let off = base + l * inner;
                for c in 0..inner {
                    out[off + c] /= sums[c];
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data: out }, rg, Op::Softmax { x, outer, len, inner })
    }

    /// Channel-wise maximum over the points of an `[N, C]` tensor. Gradient
    /// goes to the first maximal row of each channel.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "max_pool_points",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (n, c) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::EmptyInput("max_pool_points"));
        }
        let src = self.value(x).data();
        let mut argmax = vec![0usize; c];
        let mut out = src[..c].to_vec();
        for p in 1..n {
            let row = &src[p * c..(p + 1) * c];
            for j in 0..c {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = p;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![c], data: out }, rg, Op::MaxPool { x, argmax }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for p in 0..n {
            out.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, ca + cb],
                data: out,
            },
            rg,
            Op::Concat { a, b, ca, cb },
        ))
    }

    /// Interleaved duplication along the leading axis: rows `r*n .. r*n + r`
    /// of the output are copies of input row `n`.
    pub fn duplicate_points(&mut self, x: Var, r: usize) -> Result<Var> {
        if r == 0 {
            return Err(Error::arg("duplicate_points needs r >= 1"));
        }
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Dimension {
                op: "duplicate_points",
                lhs: s.to_vec(),
                rhs: vec![0],
            });
        }
        let mut shape = s.to_vec();
        let rows = shape[0];
        shape[0] = rows * r;
        let src = self.value(x).data();
        let width = if rows == 0 { 0 } else { src.len() / rows };
        let mut out = Vec::with_capacity(src.len() * r);
        for row in src.chunks_exact(width.max(1)).take(rows) {
            for _ in 0..r {
                out.extend_from_slice(&row[..width]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Duplicate { x, r }))
    }

    /// Transposed convolution along the point axis with kernel size and stride
    /// `r`; see [`deconv_forward`](super::kernels) for the exact sum.
    pub fn deconv1d_points(&mut self, x: Var, w: Var, b: Var, r: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || ws[0] != r || ws[1] != xs[1] || bs != [ws[2]] || r == 0 {
            return Err(Error::Dimension {
                op: "deconv1d_points",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[2]);
        let out = deconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            cin,
            cout,
            r,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n * r, cout],
                data: out,
            },
            rg,
            Op::Deconv { x, w, b, r },
        ))
    }

    /// `out[q, j, :] = x[idx[q * k + j], :]` for a flat `[Q, k]` index table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        if k == 0 || !idx.len().is_multiple_of(k) {
            return Err(Error::arg(format!(
                "gather_rows: index table of length {} is not a multiple of k = {k}",
                idx.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some((position, &index)) = idx.iter().enumerate().find(|(_, &i)| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                position,
                index,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len() / k, k, c],
                data: out,
            },
            rg,
            Op::Gather { x, idx: idx.to_vec() },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor {
            shape: va.shape().to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul { a, b }))
    }

    /// Sums an `[N, k, C]` tensor over its neighbor axis.
    pub fn sum_neighbors(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "sum_neighbors",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let dst = &mut out[p * c..(p + 1) * c];
            for j in 0..k {
                add_into(dst, &src[(p * k + j) * c..(p * k + j + 1) * c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c], data: out }, rg, Op::SumNeighbors { x, k }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a * factor).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale { x, factor })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a one-element `loss`, adding into the stored
    /// gradient of every `requires_grad` node that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let scale = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
        let mut send = |v: Var, mut contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            if scale != 1.0 {
                contrib.iter_mut().for_each(|c| *c *= scale);
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (cin, cout) = (wv.dim(0), wv.dim(1));
                let xv = self.value(*x);
                let rows = xv.numel() / cin.max(1);
                if needs(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(
                        rows,
                        cout,
                        cin,
                        View::rows(g, cout),
                        View::transposed(wv.data(), cout),
                        &mut dx,
                        0.0,
                    );
                    send(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    gemm(
                        cin,
                        rows,
                        cout,
                        View::transposed(xv.data(), cin),
                        View::rows(g, cout),
                        &mut dw,
                        0.0,
                    );
                    send(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        add_into(&mut db, row);
                    }
                    send(*b, db);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                send(*x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                let mut dots = vec![0.0; *inner];
                for o in 0..*outer {
                    let base = o * len * inner;
                    dots.iter_mut().for_each(|d| *d = 0.0);
                    for l in 0..*len {
                        let off = base + l * inner;
                        for c in 0..*inner {
                            dots[c] += g[off + c] * y[off + c];
                        }
                    }
                    for l in 0..*len {
                        let off = base + l * inner;
                        for c in 0..*inner {
                            dx[off + c] = y[off + c] * (g[off + c] - dots[c]);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let c = argmax.len();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (j, &p) in argmax.iter().enumerate() {
                    dx[p * c + j] += g[j];
                }
                send(*x, dx);
            }
            Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                let n = if w == 0 { 0 } else { g.len() / w };
                if needs(*a) {
                    let mut da = Vec::with_capacity(n * ca);
                    for row in g.chunks_exact(w.max(1)).take(n) {
                        da.extend_from_slice(&row[..*ca]);
                    }
                    send(*a, da);
                }
                if needs(*b) {
                    let mut db = Vec::with_capacity(n * cb);
                    for row in g.chunks_exact(w.max(1)).take(n) {
                        db.extend_from_slice(&row[*ca..]);
                    }
                    send(*b, db);
                }
            }
            Op::Duplicate { x, r } => {
                let xv = self.value(*x);
                let rows = xv.dim(0);
                let width = if rows == 0 { 0 } else { xv.numel() / rows };
                let mut dx = vec![0.0; xv.numel()];
                for p in 0..rows {
                    let dst = &mut dx[p * width..(p + 1) * width];
                    for s in 0..*r {
                        let src = (p * r + s) * width;
                        add_into(dst, &g[src..src + width]);
                    }
                }
                send(*x, dx);
            }
            Op::Deconv { x, w, b, r } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, cin, cout) = (xv.dim(0), xv.dim(1), wv.dim(2));
                // Output rows for kernel slot s form a strided [n, cout] matrix.
                let slot = |s: usize| View {
                    data: g,
                    offset: s * cout,
                    row_stride: r * cout,
                    col_stride: 1,
                };
                if needs(*x) {
                    let mut dx = vec![0.0; n * cin];
                    for s in 0..*r {
                        let wt = View {
                            data: wv.data(),
                            offset: s * cin * cout,
                            row_stride: 1,
                            col_stride: cout,
                        };
                        gemm(n, cout, cin, slot(s), wt, &mut dx, 1.0);
                    }
                    send(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; r * cin * cout];
                    for s in 0..*r {
                        gemm(
                            cin,
                            n,
                            cout,
                            View::transposed(xv.data(), cin),
                            slot(s),
                            &mut dw[s * cin * cout..(s + 1) * cin * cout],
                            0.0,
                        );
                    }
                    send(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        add_into(&mut db, row);
                    }
                    send(*b, db);
                }
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.dim(1);
                let mut dx = vec![0.0; xv.numel()];
                for (q, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * c..(i + 1) * c], &g[q * c..(q + 1) * c]);
                }
                send(*x, dx);
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    send(*a, g.to_vec());
                }
                if needs(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    send(*a, g.to_vec());
                }
                if needs(*b) {
                    send(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    send(*a, g.iter().zip(vb).map(|(gi, bi)| gi * bi).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(va).map(|(gi, ai)| gi * ai).collect());
                }
            }
            Op::SumNeighbors { x, k } => {
                let c = node.value.dim(1);
                let n = node.value.dim(0);
                let mut dx = Vec::with_capacity(n * k * c);
                for p in 0..n {
                    for _ in 0..*k {
                        dx.extend_from_slice(&g[p * c..(p + 1) * c]);
                    }
                }
                send(*x, dx);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Scale { x, factor } => send(*x, g.iter().map(|v| v * factor).collect()),
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = op.backward(&values, &node.value, g);
                for (v, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        send(*v, c);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_sum_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let w = tape.constant(t(&[2, 1], &[7.0, -3.0]));
        let b = tape.constant(t(&[1], &[5.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.linear(x, w, b).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 1]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::from_vec(vec![-3.0, -0.5]));
        let y = tape.relu(z);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 1.0).abs() < 1e-12 && d[3].abs() < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(matches!(tape.softmax_rows(x), Err(Error::Argument(_))));
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let y = tape.max_pool_points(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let single = tape.constant(t(&[1, 3], &[4.0, -1.0, 0.5]));
        let y = tape.max_pool_points(single).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, -1.0, 0.5]);
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(tape.max_pool_points(empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 1], &[2.0, 2.0, 2.0]));
        let y = tape.max_pool_points(x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[1.0]));
        let b = tape.constant(t(&[1, 1], &[2.0]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = tape.constant(Tensor::zeros(&[2, 0]));
        let c = tape.concat_channels(x, e).unwrap();
        assert_eq!(tape.value(c), tape.value(x));

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(tape.concat_channels(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn duplicate_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.duplicate_points(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0]);
        let y = tape.duplicate_points(x, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(tape.duplicate_points(x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicate_is_interleaved() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let y = tape.duplicate_points(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn deconv_scalar_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[3.0]));
        let w = tape.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.deconv1d_points(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 6.0]);
    }

    #[test]
    fn deconv_zero_weights_broadcast_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let b = tape.constant(t(&[2], &[0.25, -1.0]));
        let y = tape.deconv1d_points(x, w, b, 3).unwrap();
        assert_eq!(tape.shape(y), &[6, 2]);
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.0]);
        }
        assert!(matches!(tape.deconv1d_points(x, w, b, 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gather_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.gather_rows(x, &[0, 1, 2], 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 1, 2]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y = tape.gather_rows(x, &[0; 6], 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0].repeat(6)[..]);
        match tape.gather_rows(x, &[0, 1, 7, 2], 2) {
            Err(Error::Index { position, index, bound, .. }) => {
                assert_eq!((position, index, bound), (2, 7, 3));
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn unreachable_tensors_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::from_vec(vec![5.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_tensor(unused).data(), &[0.0]);
    }

    #[test]
    fn fault_hook_scales_named_op() {
        let mut tape = Tape::new();
        tape.inject_fault(OpKind::Relu);
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.5, 1.5]);
    }
}

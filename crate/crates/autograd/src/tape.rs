//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. Because nodes
//! can only reference earlier nodes, the tape is already in topological
//! order and [`Tape::backward`] is a single reverse sweep that visits each
//! node at most once. Gradients are accumulated additively, so a value used
//! by several operations receives the sum of all contributions.

use crate::error::{Result, TensorError};
use crate::kernels::{self, dot};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched multi-head self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sqrt(Var),
    Ln(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    SumRowGroups(Var, usize),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    MulCol(Var, Var),
    GatherRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records differentiable operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
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

    /// Multiply-add FLOPs of the matrix products and attention executed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether a gradient will flow into `v` during backward.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Binds a tensor as a leaf; it is trainable iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        let mut value = t.clone();
        value.grad = None;
        self.push(value, Op::Leaf, needs)
    }

    /// Binds a tensor as a constant regardless of its flag.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.flops += (2 * m * k * n) as u64;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a bias vector to every row (last-axis broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.last_dim();
        if tb.len() != n {
            return Err(TensorError::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape(), data)?;
        let needs = self.any_grad(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let needs = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), needs)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let needs = self.any_grad(&[a]);
        self.push(t, op, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Usage("sqrt of a non-positive value".into()));
        }
        Ok(self.map(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Usage("log of a non-positive value".into()));
        }
        Ok(self.map(a, f64::ln, Op::Ln(a)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(TensorError::shape("softmax", ta.shape(), &[]));
        }
        let n = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape(), data)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a), needs))
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::Config(format!(
                "layernorm eps must be positive, got {eps}"
            )));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        if tg.len() != n {
            return Err(TensorError::shape("layernorm gain", tx.shape(), tg.shape()));
        }
        if tb.len() != n {
            return Err(TensorError::shape("layernorm bias", tx.shape(), tb.shape()));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[rows × n] -> [rows × 1]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let data: Vec<f64> = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        let t = Tensor::new(&[rows, 1], data).expect("rows");
        let needs = self.any_grad(&[a]);
        self.push(t, Op::SumRows(a), needs)
    }

    /// Sums consecutive groups of `group` rows: `[g·group × n] -> [g × n]`.
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        if group == 0 || ta.rows() % group != 0 {
            return Err(TensorError::shape("sum_row_groups", ta.shape(), &[group]));
        }
        let n = ta.last_dim();
        let groups = ta.rows() / group;
        let mut data = vec![0.0; groups * n];
        for (r, row) in ta.data().chunks(n).enumerate() {
            add_into(&mut data[(r / group) * n..(r / group + 1) * n], row);
        }
        let t = Tensor::new(&[groups, n], data)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::SumRowGroups(a, group), needs))
    }

    /// Concatenates `[rows × c_i]` tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(TensorError::shape(
                    "concat_cols",
                    self.shape(*first),
                    t.shape(),
                ));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        let t = Tensor::new(&[rows, total], data)?;
        let needs = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Extracts column `j` as `[rows × 1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.last_dim();
        if j >= n {
            return Err(TensorError::shape("column", ta.shape(), &[j]));
        }
        let data: Vec<f64> = ta.data().chunks(n).map(|r| r[j]).collect();
        let rows = data.len();
        let t = Tensor::new(&[rows, 1], data)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::Column(a, j), needs))
    }

    /// Scales each row of `a` by the matching entry of the column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.len() != ta.rows() {
            return Err(TensorError::shape("mul_col", ta.shape(), tc.shape()));
        }
        let n = ta.last_dim();
        let mut data = ta.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(tc.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::new(ta.shape(), data)?;
        let needs = self.any_grad(&[a, c]);
        Ok(self.push(t, Op::MulCol(a, c), needs))
    }

    /// Selects rows of a `[vocab × d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::shape("gather_rows", tt.shape(), &[ids.len()]));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Usage(format!(
                "row id {bad} out of range for table of {vocab}"
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Usage("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        let needs = self.any_grad(&[table]);
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec()), needs))
    }

    /// Scaled dot-product multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]`; `key_mask` has `batch·seq`
    /// entries, nonzero for keys that may be attended to. Each sequence
    /// must have at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        key_mask: &[f64],
    ) -> Result<Var> {
        let AttentionLayout { batch, seq, heads } = layout;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(TensorError::shape("attention", tq.shape(), tk.shape()));
        }
        if tq.rank() != 2 || tq.shape()[0] != batch * seq || key_mask.len() != batch * seq {
            return Err(TensorError::shape("attention", tq.shape(), &[batch, seq]));
        }
        let d = tq.shape()[1];
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "{d} is not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            if mask.iter().all(|&m| m == 0.0) {
                return Err(TensorError::Usage(format!(
                    "sequence {b} has no attendable keys"
                )));
            }
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    let p = &mut probs
                        [((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] != 0.0 {
                            let kj = &kd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                            p[j] = dot(qi, kj) * scale;
                            max = max.max(p[j]);
                        }
                    }
                    let mut total = 0.0;
                    for j in 0..seq {
                        if mask[j] != 0.0 {
                            p[j] = (p[j] - max).exp();
                            total += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    let o = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        p[j] /= total;
                        let vj = &vd[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += p[j] * vv;
                        }
                    }
                }
            }
        }
        self.flops += (4 * batch * seq * seq * d) as u64;
        let t = Tensor::new(&[batch * seq, d], out)?;
        let needs = self.any_grad(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != targets.len() {
            return Err(TensorError::shape(
                "bce_with_logits",
                tl.shape(),
                &[targets.len()],
            ));
        }
        let n = targets.len() as f64;
        let loss = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &y)| s.max(0.0) - s * y + (-s.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
            needs,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Any gradients from a previous sweep are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !root.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// Returns zeros when no path from the root reaches `v`.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    /// Writes (accumulates) the gradient of `v` into `t.grad`.
    pub fn store_grad(&self, v: Var, t: &mut Tensor) {
        let g = self.grad(v);
        match &mut t.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => t.grad = Some(g),
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let len = node.value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so that `acc` can borrow the tape mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    kernels::matmul_a_bt_acc(g, nodes[b.0].value.data(), ga, m, n, k)
                });
                self.acc(b, |gb, nodes| {
                    kernels::matmul_at_b_acc(nodes[a.0].value.data(), g, gb, m, k, n)
                });
            }
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *x += gy * bv;
                    }
                });
                self.acc(b, |gb, nodes| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.acc(*a, |ga, _| add_into(ga, g));
                self.acc(*bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |ga, _| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                self.acc(a, |ga, nodes| {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *x += gy * kernels::gelu_grad(*av);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(&y) {
                        *x += gy * 0.5 / yv;
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                self.acc(a, |ga, nodes| {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *x += gy / av;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.last_dim();
                self.acc(*a, |ga, _| {
                    for ((gx, gy), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(gy, yr);
                        for j in 0..n {
                            gx[j] += yr[j] * (gy[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[x.0].value.last_dim();
                let gain_data = self.nodes[gain.0].value.data().to_vec();
                self.acc(*x, |gx, _| {
                    let mut dxhat = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gy[j] * gain_data[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.acc(*gain, |gg, _| {
                    for (gy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                });
                self.acc(*bias, |gb, _| {
                    for gy in g.chunks(n) {
                        add_into(gb, gy);
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(*a, |ga, _| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::SumRows(a) => {
                let n = self.nodes[a.0].value.last_dim();
                self.acc(*a, |ga, _| {
                    for (row, &gy) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x += gy);
                    }
                });
            }
            Op::SumRowGroups(a, group) => {
                let n = self.nodes[a.0].value.last_dim();
                let group = *group;
                self.acc(*a, |ga, _| {
                    for (r, row) in ga.chunks_mut(n).enumerate() {
                        add_into(row, &g[(r / group) * n..(r / group + 1) * n]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    self.acc(*p, |gp, _| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Column(a, j) => {
                let n = self.nodes[a.0].value.last_dim();
                let j = *j;
                self.acc(*a, |ga, _| {
                    for (row, &gy) in ga.chunks_mut(n).zip(g) {
                        row[j] += gy;
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (a, c) = (*a, *c);
                let n = self.nodes[a.0].value.last_dim();
                self.acc(a, |ga, nodes| {
                    let cd = nodes[c.0].value.data();
                    for ((row, gy), &s) in ga.chunks_mut(n).zip(g.chunks(n)).zip(cd) {
                        row.iter_mut().zip(gy).for_each(|(x, y)| *x += s * y);
                    }
                });
                self.acc(c, |gc, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((x, gy), ar) in gc.iter_mut().zip(g.chunks(n)).zip(ad.chunks(n)) {
                        *x += dot(gy, ar);
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let d = self.nodes[table.0].value.last_dim();
                self.acc(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *layout, probs, g),
            Op::BceWithLogits(logits, targets) => {
                let s = g[0] / targets.len() as f64;
                let l = *logits;
                self.acc(l, |gl, nodes| {
                    for ((x, &z), &y) in gl.iter_mut().zip(nodes[l.0].value.data()).zip(targets) {
                        *x += s * (kernels::sigmoid(z) - y);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: &[f64],
        g: &[f64],
    ) {
        let AttentionLayout { batch, seq, heads } = layout;
        let d = self.nodes[q.0].value.last_dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; batch * seq * d];
        let mut gk = vec![0.0; batch * seq * d];
        let mut gv = vec![0.0; batch * seq * d];
        {
            let qd = self.nodes[q.0].value.data();
            let kd = self.nodes[k.0].value.data();
            let vd = self.nodes[v.0].value.data();
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * dh;
                    let at = |x: usize| (b * seq + x) * d + col;
                    for i in 0..seq {
                        let p = &probs[((b * heads + h) * seq + i) * seq
                            ..((b * heads + h) * seq + i + 1) * seq];
                        let go = &g[at(i)..at(i) + dh];
                        let mut weighted = 0.0;
                        for j in 0..seq {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            dp[j] = dot(go, &vd[at(j)..at(j) + dh]);
                            weighted += p[j] * dp[j];
                            let gvj = &mut gv[at(j)..at(j) + dh];
                            gvj.iter_mut().zip(go).for_each(|(x, y)| *x += p[j] * y);
                        }
                        for j in 0..seq {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            for t in 0..dh {
                                gq[at(i) + t] += ds * kd[at(j) + t];
                                gk[at(j) + t] += ds * qd[at(i) + t];
                            }
                        }
                    }
                }
            }
        }
        self.acc(q, |x, _| add_into(x, &gq));
        self.acc(k, |x, _| add_into(x, &gk));
        self.acc(v, |x, _| add_into(x, &gv));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
        assert_eq!(tape.flops(), 4);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(Tensor::vector(vec![-37.5]));
        let s = tape.softmax(b).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);

        let c = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let s = tape.softmax(c).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let e = tape.constant(Tensor::scalar(1.0));
        assert!(tape.softmax(e).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[vec![4.0, 4.0, 4.0]]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::full(&[2], 1.0));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x2 = tape.constant(t(&[vec![1.0, -1.0]]));
        let y2 = tape.layernorm(x2, g2, b2, 1e-12).unwrap();
        let out = tape.value(y2).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        assert!(matches!(
            tape.layernorm(x2, g2, b2, 0.0),
            Err(TensorError::Config(_))
        ));
        assert!(tape.layernorm(x, g2, b2, 1e-5).is_err());
    }

    #[test]
    fn backward_through_column_sums() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::full(&[2, 2], 1.0));
        let x = tape.leaf(&Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap().trainable());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), vec![2.0, 2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::full(&[3], 2.0).trainable());
        let unused = tape.leaf(&Tensor::full(&[4], 1.0).trainable());
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused), vec![0.0; 4]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![3.0]).trainable());
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), vec![6.0]);

        let mut param = Tensor::vector(vec![3.0]).trainable();
        tape.store_grad(a, &mut param);
        tape.store_grad(a, &mut param);
        assert_eq!(param.grad, Some(vec![12.0]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).trainable());
        assert!(matches!(tape.backward(a), Err(TensorError::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).trainable());
        let d = tape.detach(a);
        let s = tape.add(a, d).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), vec![1.0, 1.0]);
        assert_eq!(tape.grad(d), vec![0.0, 0.0]);
    }

    #[test]
    fn attention_requires_unmasked_key() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let layout = AttentionLayout {
            batch: 1,
            seq: 2,
            heads: 2,
        };
        assert!(tape.attention(q, q, q, layout, &[0.0, 0.0]).is_err());
        let out = tape.attention(q, q, q, layout, &[1.0, 0.0]).unwrap();
        assert_eq!(tape.shape(out), &[2, 4]);
    }

    #[test]
    fn attention_ignores_masked_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 2]));
        let v = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![100.0, 100.0]]));
        let layout = AttentionLayout {
            batch: 1,
            seq: 3,
            heads: 1,
        };
        let out = tape.attention(q, q, v, layout, &[1.0, 1.0, 0.0]).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row(r), &[2.0, 3.0]);
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records every differentiable operation as it executes. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] simply walks it in reverse. The tape is
//! rebuilt for every forward pass, which lets ablation hooks change the graph
//! freely.
//!
//! Broadcasting is limited to adding a bias vector over rows; every other
//! operation requires exact shapes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        bias: Var,
    },
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMask(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Nodes that are not on a path from the loss (or do not require gradients)
/// have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient buffer out, leaving the slot empty.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` into the gradient of `v`, copying when the slot is still empty.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(d) => {
            for (a, x) in d.iter_mut().zip(g) {
                *a += x;
            }
        }
        empty => *empty = Some(g.to_vec()),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.shape() != [n] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out, (n, 1));
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// read as transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || {
            Error::shape(
                "batch_matmul",
                format!("{:?} x {:?} (transpose_b = {transpose_b})", ta.shape(), tb.shape()),
            )
        };
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if transpose_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let bs = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &tb.data()[i * k * n..(i + 1) * k * n],
                bs,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", tx.shape())));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", tx.shape())));
        }
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax"));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::NonFinite("softmax"));
                }
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Gathers rows of a `[rows, d]` table; the result is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {:?}", tt.shape())));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embedding", format!("id {id} >= {rows} rows")));
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sets entries above the diagonal of the trailing `[S, S]` block to `-inf`.
    pub fn causal_mask_fill(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 || tx.shape()[r - 1] != tx.shape()[r - 2] {
            return Err(Error::shape("causal_mask_fill", format!("{:?}", tx.shape())));
        }
        let s = tx.shape()[r - 1];
        let mut data = tx.data().to_vec();
        for block in data.chunks_exact_mut(s * s) {
            for i in 0..s {
                for v in &mut block[i * s + i + 1..(i + 1) * s] {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::CausalMask(x), &[x]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for row in tx.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SliceLast { x, start }, &[x]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || len == 0 || start + len > tx.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let c = tx.shape()[1];
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], out)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_last"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", format!("{lead:?} vs {s:?}")));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                let c = t.last_dim();
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Mean negative log-likelihood over rows of `[.., vocab]` logits whose
    /// target differs from `ignore_id`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.last_dim();
        let rows = tl.rows();
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy_masked",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut resolved = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_id {
                resolved.push(None);
            } else if t < v {
                resolved.push(Some(t));
            } else {
                return Err(Error::shape(
                    "cross_entropy_masked",
                    format!("target {t} outside vocab {v}"),
                ));
            }
        }
        let count = resolved.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLossMask);
        }
        if tl.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("cross_entropy_masked"));
        }
        let mut probs = vec![0.0; tl.len()];
        let mut total = 0.0;
        for (r, target) in resolved.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &tl.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: resolved,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar `loss`, returning the gradient of every
    /// reachable node that requires one. Multiple uses of a node accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(grads, p, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = slot(grads, *a, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * vb[k];
                    }
                }
                if self.wants(*b) {
                    let d = slot(grads, *b, g.len());
                    for k in 0..g.len() {
                        d[k] += g[k] * va[k];
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
                if self.wants(*bias) {
                    let n = out.last_dim();
                    let d = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        for (a, v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    for (d, v) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += f * v;
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    for d in slot(grads, *x, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let d = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), 1.0, d, (k, 1));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let d = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), 1.0, d, (n, 1));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                // strides of the logical k×n right operand inside one batch slab
                let (rsb, csb) = if *transpose_b { (1, k) } else { (n, 1) };
                if self.wants(*a) {
                    let d = slot(grads, *a, batch * m * k);
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            (csb, rsb),
                            1.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                            (k, 1),
                        );
                    }
                }
                if self.wants(*b) {
                    let d = slot(grads, *b, batch * k * n);
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            (1, k),
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            1.0,
                            &mut d[i * k * n..(i + 1) * k * n],
                            (rsb, csb),
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    // out is [c, r]
                    let (c, r) = (out.shape()[0], out.shape()[1]);
                    let d = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let d = slot(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            } => {
                let d_model = out.last_dim();
                let rows = out.rows();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let dg = slot(grads, *gain, d_model);
                    for r in 0..rows {
                        for j in 0..d_model {
                            dg[j] += g[r * d_model + j] * xhat[r * d_model + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = slot(grads, *bias, d_model);
                    for row in g.chunks_exact(d_model) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = slot(grads, *x, rows * d_model);
                    let inv_n = 1.0 / d_model as f64;
                    for r in 0..rows {
                        let gr = &g[r * d_model..(r + 1) * d_model];
                        let hr = &xhat[r * d_model..(r + 1) * d_model];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d_model {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for j in 0..d_model {
                            let dh = gr[j] * gv[j];
                            dx[r * d_model + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let y = out.data();
                    let d = slot(grads, *x, y.len());
                    for ((a, yv), gv) in d.iter_mut().zip(y).zip(g) {
                        *a += if *yv > 0.0 { *gv } else { 0.0 };
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let dim = tt.shape()[1];
                    let d = slot(grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            d[id * dim + j] += g[r * dim + j];
                        }
                    }
                }
            }
            Op::CausalMask(x) => {
                if self.wants(*x) {
                    let s = out.last_dim();
                    let d = slot(grads, *x, g.len());
                    for (db, gb) in d.chunks_exact_mut(s * s).zip(g.chunks_exact(s * s)) {
                        for i in 0..s {
                            for j in 0..=i {
                                db[i * s + j] += gb[i * s + j];
                            }
                        }
                    }
                }
            }
            Op::SliceLast { x, start } => {
                if self.wants(*x) {
                    let len = out.last_dim();
                    let c = self.value(*x).last_dim();
                    let d = slot(grads, *x, self.value(*x).len());
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        for (a, v) in d[r * c + start..r * c + start + len].iter_mut().zip(gr) {
                            *a += v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = out.shape()[1];
                    let d = slot(grads, *x, self.value(*x).len());
                    for (a, v) in d[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let width = out.last_dim();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).last_dim();
                    if self.wants(*p) {
                        let d = slot(grads, *p, self.value(*p).len());
                        for (r, gr) in g.chunks_exact(width).enumerate() {
                            for (a, v) in d[r * c..(r + 1) * c].iter_mut().zip(&gr[offset..offset + c]) {
                                *a += v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).last_dim();
                    let scale = g[0] / *count as f64;
                    let d = slot(grads, *logits, probs.len());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            d[r * v + j] += scale * probs[r * v + j];
                        }
                        d[r * v + t] -= scale;
                    }
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

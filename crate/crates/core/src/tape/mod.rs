//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every op of one forward pass. Parameters enter as
//! borrowed leaves, so a forward pass only needs `&` access to the model and
//! many passes can run concurrently over the same weights. [`Tape::backward`]
//! replays the tape in reverse and returns the [`Gradients`] of the leaves that
//! require them; applying those to parameters is a separate, explicit step.
//!
//! Every op works on 2-D row-major values. A rank-1 tensor of length `n` is a
//! `1 × n` row and a scalar is `1 × 1`.
//!
//! A node requires a gradient iff one of its inputs does; frozen leaves never
//! do, so no gradient is ever computed (let alone stored) for them.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{Real, View};
use crate::tensor::Tensor;

use kernels::{axpy, dot, gelu_forward, gelu_grad, gemm_nn, gemm_nt, gemm_tn, softmax_in_place};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, T> {
    Borrowed(&'a [T]),
    Owned(Vec<T>),
}

impl<T> Value<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, factor: T },
    Sum { x: usize },
    Gelu { x: usize, tanh: Vec<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SelectRows { x: usize, rows: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    Softmax { x: usize },
    CausalAttention { qkv: usize, n_head: usize, probs: Vec<T> },
    MaskedCrossEntropy { logits: usize, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward computation. `'a` is the lifetime of the borrowed
/// parameter tensors.
pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a, T>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.as_slice().len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    /// Borrowed leaf. It requires a gradient iff the tensor is trainable.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>) -> Result<Var> {
        let (rows, cols) = tensor.dims2()?;
        Ok(self.push(
            Value::Borrowed(tensor.data()),
            rows,
            cols,
            Op::Leaf,
            tensor.trainable(),
        ))
    }

    /// Owned leaf that never requires a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::dims("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(Value::Owned(data), rows, cols, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.node(v).value.as_slice()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("node shape matches value length")
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.shape(v) {
            (1, 1) => Ok(self.value(v)[0]),
            (r, c) => Err(Error::Shape(alloc::format!("expected a scalar, got {r}x{c}"))),
        }
    }

    fn shp(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.shape(v);
        [r, c]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.node(v).requires_grad)
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dims("matmul", &self.shp(a), &self.shp(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), m, n, Op::MatMul { a: a.0, b: b.0, trans_b: false }, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dims("matmul_bt", &self.shp(a), &self.shp(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), m, n, Op::MatMul { a: a.0, b: b.0, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("add", &self.shp(a), &self.shp(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), r, c, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("mul", &self.shp(a), &self.shp(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), r, c, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Adds a `1 × n` bias to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(Error::dims("add_row", &self.shp(x), &self.shp(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Value::Owned(out), m, n, Op::AddRow { x: x.0, bias: bias.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let (r, c) = self.shape(x);
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), r, c, Op::Scale { x: x.0, factor }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().fold(T::zero(), |acc, v| acc + v);
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(vec![s]), 1, 1, Op::Sum { x: x.0 }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (out, tanh) = gelu_forward(self.value(x));
        let (r, c) = self.shape(x);
        let rg = self.rg(&[x]);
        let tanh = if rg { tanh } else { Vec::new() };
        Ok(self.push(Value::Owned(out), r, c, Op::Gelu { x: x.0, tanh }, rg))
    }

    /// Row-wise `(x − mean) / sqrt(var + eps) · gamma + beta`, biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, d) = self.shape(x);
        if d == 0 {
            return Err(Error::dims("layer_norm", &self.shp(x), &self.shp(gamma)));
        }
        if self.shape(gamma) != (1, d) {
            return Err(Error::dims("layer_norm", &self.shp(x), &self.shp(gamma)));
        }
        if self.shape(beta) != (1, d) {
            return Err(Error::dims("layer_norm", &self.shp(x), &self.shp(beta)));
        }
        if !(eps > T::zero()) {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let inv_d = T::one() / T::from_usize(d);
        let mut out = vec![T::zero(); m * d];
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            Value::Owned(out),
            m,
            d,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            rg,
        ))
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { what: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Value::Owned(out),
            ids.len(),
            d,
            Op::Gather { table: table.0, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Rows `start .. start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.shape(x);
        if start + len > m {
            return Err(Error::Index { what: "row", index: start + len, bound: m });
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), len, d, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Rows `rows` of `x`, in order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.shape(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { what: "row", index: r, bound: m });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Value::Owned(out),
            rows.len(),
            d,
            Op::SelectRows { x: x.0, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Error::dims("concat_rows", &self.shp(a), &self.shp(b)));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(out), ra + rb, ca, Op::ConcatRows { a: a.0, b: b.0 }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).to_vec();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Value::Owned(out), m, n, Op::Softmax { x: x.0 }, rg))
    }

    /// Multi-head causal self-attention over fused projections.
    ///
    /// `qkv` is `S × 3d`, each row laid out as `[q | k | v]`, each of those
    /// split into `n_head` contiguous heads of width `d / n_head`. Position `i`
    /// attends to positions `0..=i` only. The result is `S × d`.
    pub fn causal_attention(&mut self, qkv: Var, n_head: usize) -> Result<Var> {
        let (s, three_d) = self.shape(qkv);
        if n_head == 0 || three_d % 3 != 0 || (three_d / 3) % n_head != 0 {
            return Err(Error::Shape(alloc::format!(
                "causal_attention: width {three_d} is not 3·d with d divisible by {n_head} heads"
            )));
        }
        let d = three_d / 3;
        let dh = d / n_head;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let src = self.value(qkv);
        let mut out = vec![T::zero(); s * d];
        // Full S×S products per head; the causal upper triangle of each
        // probability block is exactly zero, so it contributes nothing.
        let mut probs = vec![T::zero(); n_head * s * s];
        for h in 0..n_head {
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            let q = View { data: &src[h * dh..], row_stride: three_d, col_stride: 1 };
            let kt = View { data: &src[d + h * dh..], row_stride: 1, col_stride: three_d };
            T::gemm_acc(s, dh, s, q, kt, p, s);
            for (i, row) in p.chunks_exact_mut(s).enumerate() {
                let (live, masked) = row.split_at_mut(i + 1);
                for x in live.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(live);
                masked.fill(T::zero());
            }
            let v = View { data: &src[2 * d + h * dh..], row_stride: three_d, col_stride: 1 };
            T::gemm_acc(s, s, dh, View::row_major(p, s), v, &mut out[h * dh..], d);
        }
        let rg = self.rg(&[qkv]);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            Value::Owned(out),
            s,
            d,
            Op::CausalAttention { qkv: qkv.0, n_head, probs },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over positions where
    /// `loss_mask` is true. Masked-out rows are never read.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var> {
        let (t, v) = self.shape(logits);
        if targets.len() != t || loss_mask.len() != t {
            return Err(Error::dims("masked_cross_entropy", &[t, v], &[targets.len(), loss_mask.len()]));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| loss_mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let picked: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
        for &tg in &picked {
            if tg >= v {
                return Err(Error::Index { what: "target", index: tg, bound: v });
            }
        }
        let src = self.value(logits);
        let rg = self.rg(&[logits]);
        let mut probs = if rg { vec![T::zero(); rows.len() * v] } else { Vec::new() };
        let mut total = T::zero();
        for (i, (&r, &tg)) in rows.iter().zip(&picked).enumerate() {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
            let mut sum = T::zero();
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            total += lse - row[tg];
            if rg {
                let p = &mut probs[i * v..(i + 1) * v];
                for (pj, &x) in p.iter_mut().zip(row) {
                    *pj = (x - lse).exp();
                }
            }
        }
        let loss = total / T::from_usize(rows.len());
        Ok(self.push(
            Value::Owned(vec![loss]),
            1,
            1,
            Op::MaskedCrossEntropy { logits: logits.0, rows, targets: picked, probs },
            rg,
        ))
    }

    /// Gradients of scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(alloc::format!(
                "backward needs a scalar loss, got {:?}",
                self.shp(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<(usize, Vec<T>)> = Vec::new();
        if !self.node(loss).requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves.push((i, g)),
                Op::MatMul { a, b, trans_b } => {
                    let (a, b) = (*a, *b);
                    let (m, ncols) = (node.rows, node.cols);
                    let av = self.nodes[a].value.as_slice();
                    let bv = self.nodes[b].value.as_slice();
                    let k = self.nodes[a].cols;
                    if let Some(da) = self.slot(&mut grads, a) {
                        if *trans_b {
                            gemm_nn(&g, bv, da, m, ncols, k);
                        } else {
                            gemm_nt(&g, bv, da, m, ncols, k);
                        }
                    }
                    if let Some(db) = self.slot(&mut grads, b) {
                        if *trans_b {
                            gemm_tn(&g, av, db, m, ncols, k);
                        } else {
                            gemm_tn(av, &g, db, m, k, ncols);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for idx in [*a, *b] {
                        if let Some(d) = self.slot(&mut grads, idx) {
                            axpy(d, T::one(), &g);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].value.as_slice();
                    let bv = self.nodes[b].value.as_slice();
                    if let Some(da) = self.slot(&mut grads, a) {
                        for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if let Some(db) = self.slot(&mut grads, b) {
                        for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let ncols = node.cols;
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        axpy(dx, T::one(), &g);
                    }
                    if let Some(db) = self.slot(&mut grads, *bias) {
                        if ncols > 0 {
                            for row in g.chunks_exact(ncols) {
                                axpy(db, T::one(), row);
                            }
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        axpy(dx, f, &g);
                    }
                }
                Op::Sum { x } => {
                    let g0 = g[0];
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for d in dx.iter_mut() {
                            *d += g0;
                        }
                    }
                }
                Op::Gelu { x, tanh } => {
                    let xv = self.nodes[*x].value.as_slice();
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for (((d, &gi), &xi), &ti) in dx.iter_mut().zip(&g).zip(xv).zip(tanh) {
                            *d += gi * gelu_grad(xi, ti);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (m, d) = (node.rows, node.cols);
                    let gv = self.nodes[*gamma].value.as_slice();
                    if let Some(dg) = self.slot(&mut grads, *gamma) {
                        for r in 0..m {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if let Some(db) = self.slot(&mut grads, *beta) {
                        for row in g.chunks_exact(d) {
                            axpy(db, T::one(), row);
                        }
                    }
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        let inv_d = T::one() / T::from_usize(d);
                        let mut dxhat = vec![T::zero(); d];
                        for r in 0..m {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for j in 0..d {
                                dxhat[j] = gr[j] * gv[j];
                                mean_dxhat += dxhat[j];
                                mean_dxhat_xhat += dxhat[j] * hr[j];
                            }
                            mean_dxhat *= inv_d;
                            mean_dxhat_xhat *= inv_d;
                            let rs = rstd[r];
                            let dr = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                dr[j] += rs * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = node.cols;
                    if let Some(dt) = self.slot(&mut grads, *table) {
                        for (t, &id) in ids.iter().enumerate() {
                            axpy(&mut dt[id * d..(id + 1) * d], T::one(), &g[t * d..(t + 1) * d]);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let d = node.cols;
                    let off = *start * d;
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        axpy(&mut dx[off..off + g.len()], T::one(), &g);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let d = node.cols;
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for (t, &r) in rows.iter().enumerate() {
                            axpy(&mut dx[r * d..(r + 1) * d], T::one(), &g[t * d..(t + 1) * d]);
                        }
                    }
                }
                Op::ConcatRows { a, b } => {
                    let split = self.nodes[*a].rows * node.cols;
                    if let Some(da) = self.slot(&mut grads, *a) {
                        axpy(da, T::one(), &g[..split]);
                    }
                    if let Some(db) = self.slot(&mut grads, *b) {
                        axpy(db, T::one(), &g[split..]);
                    }
                }
                Op::Softmax { x } => {
                    let ncols = node.cols;
                    let y = node.value.as_slice();
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        if ncols > 0 {
                            for ((dr, gr), yr) in dx
                                .chunks_exact_mut(ncols)
                                .zip(g.chunks_exact(ncols))
                                .zip(y.chunks_exact(ncols))
                            {
                                let s = dot(gr, yr);
                                for j in 0..ncols {
                                    dr[j] += yr[j] * (gr[j] - s);
                                }
                            }
                        }
                    }
                }
                Op::CausalAttention { qkv, n_head, probs } => {
                    let src = self.nodes[*qkv].value.as_slice();
                    let (s, d) = (node.rows, node.cols);
                    let n_head = *n_head;
                    if let Some(dqkv) = self.slot(&mut grads, *qkv) {
                        attention_backward(src, &g, probs, dqkv, s, d, n_head);
                    }
                }
                Op::MaskedCrossEntropy { logits, rows, targets, probs } => {
                    let v = self.nodes[*logits].cols;
                    let coef = g[0] / T::from_usize(rows.len());
                    if let Some(dl) = self.slot(&mut grads, *logits) {
                        for (i, (&r, &tg)) in rows.iter().zip(targets).enumerate() {
                            let dr = &mut dl[r * v..(r + 1) * v];
                            axpy(dr, coef, &probs[i * v..(i + 1) * v]);
                            dr[tg] -= coef;
                        }
                    }
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    /// Gradient buffer for node `idx`, allocated on demand; `None` if the node
    /// does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], idx: usize) -> Option<&'g mut [T]> {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return None;
        }
        let len = node.rows * node.cols;
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

fn attention_backward<T: Real>(
    src: &[T],
    g: &[T],
    probs: &[T],
    dqkv: &mut [T],
    s: usize,
    d: usize,
    n_head: usize,
) {
    let three_d = 3 * d;
    let dh = d / n_head;
    let scale = T::one() / T::from_usize(dh).sqrt();
    let mut dp = vec![T::zero(); s * s];
    for h in 0..n_head {
        let (q_off, k_off, v_off) = (h * dh, d + h * dh, 2 * d + h * dh);
        let p = &probs[h * s * s..(h + 1) * s * s];
        let dout = View { data: &g[h * dh..], row_stride: d, col_stride: 1 };
        let strided = |off: usize| View { data: &src[off..], row_stride: three_d, col_stride: 1 };
        T::gemm_acc(s, s, dh, View::transposed(p, s), dout, &mut dqkv[v_off..], three_d);
        dp.fill(T::zero());
        let vt = View { data: &src[v_off..], row_stride: 1, col_stride: three_d };
        T::gemm_acc(s, dh, s, dout, vt, &mut dp, s);
        // dp becomes the score gradient in place.
        for (pr, dr) in p.chunks_exact(s).zip(dp.chunks_exact_mut(s)) {
            let weighted = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (x, &pj) in dr.iter_mut().zip(pr) {
                *x = pj * (*x - weighted) * scale;
            }
        }
        T::gemm_acc(s, s, dh, View::row_major(&dp, s), strided(k_off), &mut dqkv[q_off..], three_d);
        T::gemm_acc(s, s, dh, View::transposed(&dp, s), strided(q_off), &mut dqkv[k_off..], three_d);
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        let pos = self.leaves.iter().position(|(i, _)| *i == v.0)?;
        Some(self.leaves.swap_remove(pos).1)
    }

    /// Adds the gradient of `v` into `tensor`'s gradient buffer. Returns
    /// whether anything was accumulated.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<bool> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(false),
        }
    }
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. Nodes only ever reference earlier nodes, so the record is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep that touches each node at most once.
//!
//! Leaves created with `requires_grad = false` never receive a gradient
//! buffer; this is how frozen parameters and constant inputs are handled.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Transpose(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Reshape(Var),
    Upsample2x(Var),
    Bce {
        logits: Var,
        target: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// `None` for any node that does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose backward rule was executed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[.., d] + b` with `b` holding exactly `d` values, added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).len() != d {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bv).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k: T = c(s);
        let data = self.value(x).data().iter().map(|&v| v * k).collect();
        let out = Tensor::new(self.shape(x), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(self.shape(x), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            c(eps),
        );
        let out = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-head softmax attention: `q[h,nq,dh]`, `k,v[h,nk,dh]`, scores
    /// scaled by `1/sqrt(dh)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let ok = qs.len() == 3 && ks.len() == 3 && ks == vs && qs[0] == ks[0] && qs[2] == ks[2];
        if !ok {
            return Err(shape_err("attention", qs, ks));
        }
        let (h, nq, dh, nk) = (qs[0], qs[1], qs[2], ks[1]);
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            h,
            nq,
            nk,
            dh,
        );
        let out = Tensor::new(&[h, nq, dh], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, rg))
    }

    /// `[n, h·dh] -> [h, n, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("split_heads", self.shape(x), &[heads]));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * dh..(h * n + i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let out = Tensor::new(&[heads, n, dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SplitHeads(x, heads), rg))
    }

    /// `[h, n, dh] -> [n, h·dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let &[heads, n, dh] = self.shape(x) else {
            return Err(shape_err("merge_heads", self.shape(x), &[0, 0, 0]));
        };
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            for i in 0..n {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MergeHeads(x, heads), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2(a, "concat_rows")?;
        let (mb, nb) = self.dims2(b, "concat_rows")?;
        if na != nb {
            return Err(shape_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(&[ma + mb, na], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..end` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(shape_err("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(&[end - start, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Align-corners-false bilinear 2× upsampling of a `[h, w]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.dims2(x, "upsample2x")?;
        if h < 2 || w < 2 {
            return Err(shape_err("upsample2x", self.shape(x), &[2, 2]));
        }
        let out = kernels::upsample2x(self.value(x).data(), h, w);
        let out = Tensor::new(&[2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Mean binary cross-entropy between logits and targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(shape_err("bce", self.shape(logits), target.shape()));
        }
        if let Some(bad) = target.data().iter().find(|&&y| !(y >= T::zero() && y <= T::one())) {
            return Err(Error::invalid(format!("bce target {bad} outside [0, 1]")));
        }
        let z = self.value(logits).data();
        let n = T::from_usize(z.len()).unwrap();
        let loss = z
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| kernels::bce_logit(z, y))
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf that requires a gradient gets a buffer, zero-filled when
    /// the leaf does not influence `loss`. Nodes that do not require a
    /// gradient never get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            // keep intermediate gradients addressable for inspection
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                Some(Tensor::new(node.value.shape(), data).unwrap())
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_a_bt_acc(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_at_b_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let cols = self.value(*b).len();
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &g), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                let k: T = c(*s);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g * k);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &x) in dx.iter_mut().zip(g).zip(xv) {
                        *d += g * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(d) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_gy = T::zero();
                        let mut mean_gyh = T::zero();
                        for j in 0..d {
                            let gy = grow[j] * gm[j];
                            mean_gy += gy;
                            mean_gyh += gy * hrow[j];
                        }
                        mean_gy *= inv_d;
                        mean_gyh *= inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            let gy = grow[j] * gm[j];
                            dx[r * d + j] += rs * (gy - mean_gy - hrow[j] * mean_gyh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (h, nq, dh) = (self.shape(*q)[0], self.shape(*q)[1], self.shape(*q)[2]);
                let nk = self.shape(*k)[1];
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let need_q = self.nodes[q.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let need_v = self.nodes[v.0].requires_grad;
                let mut dq = vec![T::zero(); if need_q { qv.len() } else { 0 }];
                let mut dk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
                let mut dv = vec![T::zero(); if need_v { vv.len() } else { 0 }];
                let mut dp = vec![T::zero(); nq * nk];
                for hh in 0..h {
                    let p = &probs[hh * nq * nk..(hh + 1) * nq * nk];
                    let go = &g[hh * nq * dh..(hh + 1) * nq * dh];
                    let qs = hh * nq * dh..(hh + 1) * nq * dh;
                    let ks = hh * nk * dh..(hh + 1) * nk * dh;
                    if need_v {
                        kernels::matmul_at_b_acc(p, go, &mut dv[ks.clone()], nq, nk, dh);
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    dp.iter_mut().for_each(|x| *x = T::zero());
                    kernels::matmul_a_bt_acc(go, &vv[ks.clone()], &mut dp, nq, dh, nk);
                    // softmax backward, folded with the score scale
                    for (prow, drow) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot) * scale;
                        }
                    }
                    if need_q {
                        kernels::matmul_acc(&dp, &kv[ks.clone()], &mut dq[qs.clone()], nq, nk, dh);
                    }
                    if need_k {
                        kernels::matmul_at_b_acc(&dp, &qv[qs], &mut dk[ks], nq, nk, dh);
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = self.slot(grads, *var) {
                        d.iter_mut().zip(&buf).for_each(|(d, &b)| *d += b);
                    }
                }
            }
            Op::SplitHeads(x, heads) => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dh = d / heads;
                if let Some(dx) = self.slot(grads, *x) {
                    for h in 0..*heads {
                        for i in 0..n {
                            for j in 0..dh {
                                dx[i * d + h * dh + j] += g[(h * n + i) * dh + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(x, heads) => {
                let (n, dh) = (self.shape(*x)[1], self.shape(*x)[2]);
                let d = heads * dh;
                if let Some(dx) = self.slot(grads, *x) {
                    for h in 0..*heads {
                        for i in 0..n {
                            for j in 0..dh {
                                dx[(h * n + i) * dh + j] += g[i * d + h * dh + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(&g[..split]).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(&g[split..]).for_each(|(d, &g)| *d += g);
                }
            }
            Op::SliceRows(x, start) => {
                let n = self.shape(*x)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    dx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Upsample2x(x) => {
                let (h, w) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::upsample2x_backward(g, h, w, dx);
                }
            }
            Op::Bce { logits, target } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::from_usize(z.len()).unwrap();
                if let Some(dz) = self.slot(grads, *logits) {
                    for ((d, &z), &y) in dz.iter_mut().zip(z).zip(target) {
                        *d += (kernels::sigmoid(z) - y) * scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Attention weights for `q[h,nq,dh]`, `k[h,nk,dh]` without recording.
pub fn attention_weights<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(shape_err("attention", qs, ks));
    }
    let v = Tensor::zeros(ks);
    let (_, probs) = kernels::attention(q.data(), k.data(), v.data(), qs[0], qs[1], ks[1], qs[2]);
    Tensor::new(&[qs[0], qs[1], ks[1]], probs)
}

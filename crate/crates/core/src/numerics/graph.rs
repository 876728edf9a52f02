//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! is a valid topological order for the backward pass. Operations whose
//! inputs do not require gradients are stored as plain values.

use crate::error::{shape_err, Error, Result};

use super::ops;
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
        bias: Var,
    },
    Gelu(Var),
    Rope(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor<T>>,
    },
    Softmax(Var),
    ColScale(Var, Var, usize),
    ElemScale(Var, Var, usize),
    MeanRows(Var),
    PrefixMean(Var),
    Embedding(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Tensor<T>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for a backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Forward-only evaluation; nothing is retained for differentiation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let keep = self.record && requires_grad;
        self.nodes.push(Node {
            value,
            op: if keep { op } else { Op::Leaf },
            requires_grad: keep,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), g))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias_rows(self.value(x), self.value(bias))?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), g))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let g = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), g)
    }

    pub fn rope(&mut self, x: Var, heads: usize) -> Result<Var> {
        let out = ops::rope(self.value(x), heads, false)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Rope(x, heads), g))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) =
            ops::causal_attention(self.value(q), self.value(k), self.value(v), heads)?;
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            g,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), g))
    }

    /// `x ⊙ w[:, col]` with the column broadcast across the width of `x`.
    pub fn col_scale(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let out = ops::col_scale(self.value(x), self.value(w), col)?;
        let g = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::ColScale(x, w, col), g))
    }

    /// `x · s[idx]` for a scalar picked out of `s` by flat index.
    pub fn elem_scale(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = *self
            .value(s)
            .data()
            .get(idx)
            .ok_or_else(|| shape_err!("index {idx} outside coefficient tensor"))?;
        let out = self.value(x).scale(sv);
        let g = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ElemScale(x, s, idx), g))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanRows(x), g))
    }

    /// Row `i` becomes the mean of rows `0..=i`.
    pub fn prefix_mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::prefix_mean_rows(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::PrefixMean(x), g))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!("token id {id} outside vocab {v}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let g = self.any_grad(&[table]);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), g))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            g,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), g)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads)?;
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                g.ensure_finite("gradient")?;
            }
            debug_assert!(g.is_none() || matches!(node.op, Op::Leaf));
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone())?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.scale(-T::ONE))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ops::matmul_nt(&g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = ops::matmul_tn(self.value(*a), &g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ops::matmul(&g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = ops::matmul_tn(&g, self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(*bias) {
                    let c = g.cols();
                    let mut gb = vec![T::ZERO; c];
                    for i in 0..g.rows() {
                        for (o, &v) in gb.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*bias).shape(), gb)?;
                    self.accumulate(grads, *bias, gb)?;
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = g.dims2()?;
                let gamma = self.value(*gain).data();
                let mut ggain = vec![T::ZERO; c];
                let mut gbias = vec![T::ZERO; c];
                let mut gx = vec![T::ZERO; r * c];
                let inv_c = T::from_f64(1.0 / c as f64);
                let mut gxhat = vec![T::ZERO; c];
                for i in 0..r {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mut mean_g = T::ZERO;
                    let mut mean_gx = T::ZERO;
                    for j in 0..c {
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                        gxhat[j] = gr[j] * gamma[j];
                        mean_g += gxhat[j];
                        mean_gx += gxhat[j] * xr[j];
                    }
                    mean_g *= inv_c;
                    mean_gx *= inv_c;
                    for j in 0..c {
                        gx[i * c + j] = rstd[i] * (gxhat[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *gain, Tensor::new(self.value(*gain).shape(), ggain)?)?;
                self.accumulate(grads, *bias, Tensor::new(self.value(*bias).shape(), gbias)?)?;
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx)?)?;
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * ops::gelu_grad_scalar(xv))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Rope(x, heads) => {
                let gx = ops::rope(&g, *heads, true)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g)?;
                self.accumulate(grads, *q, gq)?;
                self.accumulate(grads, *k, gk)?;
                self.accumulate(grads, *v, gv)?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut gx = vec![T::ZERO; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx)?)?;
            }
            Op::ColScale(x, w, col) => {
                let wv = self.value(*w);
                if self.requires_grad(*w) {
                    let xv = self.value(*x);
                    let mut gw = Tensor::zeros(wv.shape());
                    let wc = wv.cols();
                    for i in 0..g.rows() {
                        let s: T = g.row(i).iter().zip(xv.row(i)).map(|(&a, &b)| a * b).sum();
                        gw.data_mut()[i * wc + col] = s;
                    }
                    self.accumulate(grads, *w, gw)?;
                }
                if self.requires_grad(*x) {
                    let gx = ops::col_scale(&g, wv, *col)?;
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::ElemScale(x, s, idx) => {
                let sv = self.value(*s);
                if self.requires_grad(*s) {
                    let mut gs = Tensor::zeros(sv.shape());
                    gs.data_mut()[*idx] = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.accumulate(grads, *s, gs)?;
                }
                let factor = sv.data()[*idx];
                self.accumulate(grads, *x, g.scale(factor))?;
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let inv = T::from_f64(1.0 / r as f64);
                let mut gx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    gx.extend(g.data().iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx)?)?;
            }
            Op::PrefixMean(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut gx = vec![T::ZERO; r * c];
                let mut acc = vec![T::ZERO; c];
                for i in (0..r).rev() {
                    let inv = T::from_f64(1.0 / (i + 1) as f64);
                    for (a, &v) in acc.iter_mut().zip(g.row(i)) {
                        *a += v * inv;
                    }
                    gx[i * c..(i + 1) * c].copy_from_slice(&acc);
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx)?)?;
            }
            Op::Embedding(table, ids) => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                let d = tv.cols();
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let g0 = g.data()[0];
                let r = targets.len();
                let c = probs.cols();
                let scale = g0 * T::from_f64(1.0 / r as f64);
                let mut gl = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * c + t] -= T::ONE;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(probs.shape(), gl)?)?;
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g0))?;
            }
        }
        Ok(())
    }
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[Tensor<T>],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (l, d) = q.dims2()?;
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut gq = vec![T::ZERO; l * d];
    let mut gk = vec![T::ZERO; l * d];
    let mut gv = vec![T::ZERO; l * d];
    let mut gp = vec![T::ZERO; l];
    for (h, p) in probs.iter().enumerate() {
        let off = h * hd;
        let pd = p.data();
        for i in 0..l {
            let gi = &gd[i * d + off..i * d + off + hd];
            // dP[i, j] = dO[i] · V[j]
            let mut dot = T::ZERO;
            for j in 0..=i {
                let vj = &vd[j * d + off..j * d + off + hd];
                let mut s = T::ZERO;
                for (&a, &b) in gi.iter().zip(vj) {
                    s += a * b;
                }
                gp[j] = s;
                dot += pd[i * l + j] * s;
            }
            let qi = &qd[i * d + off..i * d + off + hd];
            for j in 0..=i {
                let pij = pd[i * l + j];
                // dV[j] += P[i, j] dO[i]
                for (o, &a) in gv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                    *o += pij * a;
                }
                let gs = pij * (gp[j] - dot) * scale;
                let kj = &kd[j * d + off..j * d + off + hd];
                for (o, &a) in gq[i * d + off..i * d + off + hd].iter_mut().zip(kj) {
                    *o += gs * a;
                }
                for (o, &a) in gk[j * d + off..j * d + off + hd].iter_mut().zip(qi) {
                    *o += gs * a;
                }
            }
        }
    }
    Ok((
        Tensor::new(&[l, d], gq)?,
        Tensor::new(&[l, d], gk)?,
        Tensor::new(&[l, d], gv)?,
    ))
}

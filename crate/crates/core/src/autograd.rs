//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is a topological order and `backward` walks it
//! in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSets {
    /// One statistic per channel over `(n, h, w)`.
    PerChannel,
    /// One statistic per `(sample, group)` over `(c / groups, h, w)`.
    PerGroup(usize),
}

enum Op<T> {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Relu(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sigmoid(Var),
    Softplus(Var),
    MulBroadcast { x: Var, s: Var },
    SpatialMean(Var),
    Concat(Vec<Var>),
    Resize(Var),
    /// Normalization with batch statistics. `xhat` and `inv_std` are saved for backward.
    Norm { x: Var, gamma: Var, beta: Var, sets: NormSets, xhat: Vec<T>, inv_std: Vec<T> },
    /// Per-channel affine with frozen statistics (inference-mode normalization).
    FrozenNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    ChannelMax { xs: Vec<Var>, arg: Vec<u32> },
    SoftmaxCe { logits: Vec<Var>, probs: Vec<T>, labels: Vec<u32> },
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode normalization, applied to the
/// running buffers after the step.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

pub const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true, stat_updates: Vec::new() }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!("conv input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::ShapeMismatch(format!("conv bias for {} outputs", ws[0])));
            }
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    /// `x[n, c, :, :] * s[n, c', 0, 0]` with `c' ∈ {1, c}`.
    pub fn mul_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        let ss = self.value(s).shape();
        if ss[0] != n || (ss[1] != 1 && ss[1] != c) || ss[2] != 1 || ss[3] != 1 {
            return Err(Error::ShapeMismatch(format!("scale {ss:?} for {:?}", [n, c, h, w])));
        }
        let p = h * w;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            let (sn, sc) = (i / c, i % c);
            let f = sv[sn * ss[1] + if ss[1] == 1 { 0 } else { sc }];
            for v in chunk {
                *v *= f;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulBroadcast { x, s }, ng))
    }

    /// Channel-wise average pooling: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let denom = T::of((h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / denom).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("shape by construction");
        let ng = self.ng(x);
        self.push(out, Op::SpatialMean(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&parts)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Concat(xs.to_vec()), ng))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let [_, _, ih, iw] = self.value(x).shape();
        if (ih, iw) == (h, w) {
            return x;
        }
        let out = kernels::resize_bilinear(self.value(x), h, w);
        let ng = self.ng(x);
        self.push(out, Op::Resize(x), ng)
    }

    /// Normalize with statistics of the current batch, then apply a per-channel affine.
    /// Returns the output and the per-set `(mean, biased variance)`.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, sets: NormSets) -> Result<(Var, Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.value(x).shape();
        check_affine(self.value(gamma), self.value(beta), c)?;
        let p = h * w;
        let ranges = norm_ranges(sets, [n, c, h, w])?;
        let xv = self.value(x).data();
        let eps = T::of(NORM_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(ranges.len());
        let mut vars = Vec::with_capacity(ranges.len());
        let mut inv_std = Vec::with_capacity(ranges.len());
        for set in &ranges {
            let count = T::of(set.iter().map(|r| r.1).sum::<usize>() as f64);
            let mut mean = T::zero();
            for &(s, l) in set {
                mean += xv[s..s + l].iter().copied().sum::<T>();
            }
            mean = mean / count;
            let mut var = T::zero();
            for &(s, l) in set {
                var += xv[s..s + l].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            var = var / count;
            let is = T::one() / (var + eps).sqrt();
            for &(s, l) in set {
                for i in s..s + l {
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
            means.push(mean);
            vars.push(var);
            inv_std.push(is);
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros([n, c, h, w]);
        for (i, (o, &xh)) in out.data_mut().iter_mut().zip(&xhat).enumerate() {
            let ch = (i / p) % c;
            *o = xh * gv[ch] + bv[ch];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let keep = self.grad_enabled && ng;
        let op = Op::Norm {
            x,
            gamma,
            beta,
            sets,
            xhat: if keep { xhat } else { Vec::new() },
            inv_std: if keep { inv_std } else { Vec::new() },
        };
        Ok((self.push(out, op, ng), means, vars))
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    /// Per-channel normalization with fixed statistics.
    pub fn frozen_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        check_affine(self.value(gamma), self.value(beta), c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch(format!("running stats for {c} channels")));
        }
        let p = h * w;
        let eps = T::of(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / p) % c;
            *o = (*o - mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
        }
        let _ = n;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::FrozenNorm { x, gamma, beta, mean: mean.to_vec(), inv_std }, ng))
    }

    /// Position-wise maximum across single-channel maps.
    pub fn channel_max(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyChildSet)?;
        let shape = self.value(first).shape();
        if shape[1] != 1 {
            return Err(Error::ShapeMismatch(format!("channel max expects 1-channel maps, got {shape:?}")));
        }
        for &v in xs {
            if self.value(v).shape() != shape {
                return Err(Error::ShapeMismatch(format!("{:?} vs {shape:?}", self.value(v).shape())));
            }
        }
        let mut out = self.value(first).clone();
        let mut arg = vec![0u32; out.len()];
        for (k, &v) in xs.iter().enumerate().skip(1) {
            for ((o, a), &c) in out.data_mut().iter_mut().zip(arg.iter_mut()).zip(self.nodes[v.0].value.data()) {
                if c > *o {
                    *o = c;
                    *a = k as u32;
                }
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::ChannelMax { xs: xs.to_vec(), arg }, ng))
    }

    /// Mean cross-entropy of the softmax over `logits` (each `[n, 1, h, w]`),
    /// with `labels` indexing the list, laid out `[n, h, w]`.
    pub fn softmax_ce(&mut self, logits: &[Var], labels: &[u32]) -> Result<Var> {
        let first = *logits.first().ok_or_else(|| Error::ShapeMismatch("no logits".into()))?;
        let shape = self.value(first).shape();
        let [n, _, h, w] = shape;
        let m = n * h * w;
        if labels.len() != m {
            return Err(Error::ShapeMismatch(format!("{} labels for {m} pixels", labels.len())));
        }
        for &v in logits {
            if self.value(v).shape() != [n, 1, h, w] {
                return Err(Error::ShapeMismatch(format!("logit {:?} vs {shape:?}", self.value(v).shape())));
            }
        }
        let c = logits.len();
        let mut probs = vec![T::zero(); c * m];
        let mut loss = T::zero();
        for i in 0..m {
            let y = labels[i] as usize;
            if y >= c {
                return Err(Error::AlphabetViolation { value: y, alphabet: c });
            }
            let mut mx = T::neg_infinity();
            for &v in logits {
                mx = mx.max(self.nodes[v.0].value.data()[i]);
            }
            let mut z = T::zero();
            for (k, &v) in logits.iter().enumerate() {
                let e = (self.nodes[v.0].value.data()[i] - mx).exp();
                probs[k * m + i] = e;
                z += e;
            }
            let lz = z.ln();
            loss += lz - (self.nodes[logits[y].0].value.data()[i] - mx);
            for k in 0..c {
                probs[k * m + i] = probs[k * m + i] / z;
            }
        }
        let out = Tensor::scalar(loss / T::of(m as f64));
        let ng = logits.iter().any(|&v| self.ng(v));
        let keep = self.grad_enabled && ng;
        let op = Op::SoftmaxCe {
            logits: logits.to_vec(),
            probs: if keep { probs } else { Vec::new() },
            labels: if keep { labels.to_vec() } else { Vec::new() },
        };
        Ok(self.push(out, op, ng))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &v in xs {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::ShapeMismatch(format!("sum expects scalars, got {:?}", t.shape())));
            }
            total += t.data()[0];
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::scalar(total), Op::Sum(xs.to_vec()), ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::ShapeMismatch("backward on a no-grad graph".into()));
        }
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => leaves[i] = Some(g),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *geom,
                        self.ng(*x),
                        self.ng(*w),
                        b.is_some_and(|b| self.ng(b)),
                    );
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, Some(g.clone()));
                    self.acc(&mut grads, *b, Some(g));
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    self.acc(&mut grads, *x, Some(dx));
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= *lo || v >= *hi {
                            *d = T::zero();
                        }
                    }
                    self.acc(&mut grads, *x, Some(dx));
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (T::one() - y);
                    }
                    self.acc(&mut grads, *x, Some(dx));
                }
                Op::Softplus(x) => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d *= sigmoid(v);
                    }
                    self.acc(&mut grads, *x, Some(dx));
                }
                Op::MulBroadcast { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let [_, c, h, w] = xv.shape();
                    let sc = sv.c();
                    let p = h * w;
                    let idx = |i: usize| (i / c) * sc + if sc == 1 { 0 } else { i % c };
                    if self.ng(*x) {
                        let mut dx = g.clone();
                        for (i, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                            let f = sv.data()[idx(i)];
                            for v in chunk {
                                *v *= f;
                            }
                        }
                        self.acc(&mut grads, *x, Some(dx));
                    }
                    if self.ng(*s) {
                        let mut ds = Tensor::zeros(sv.shape());
                        for (i, (gc, xc)) in g.data().chunks(p).zip(xv.data().chunks(p)).enumerate() {
                            let dot: T = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                            ds.data_mut()[idx(i)] += dot;
                        }
                        self.acc(&mut grads, *s, Some(ds));
                    }
                }
                Op::SpatialMean(x) => {
                    let shape = self.value(*x).shape();
                    let p = shape[2] * shape[3];
                    let denom = T::of(p as f64);
                    let mut dx = Tensor::zeros(shape);
                    for (chunk, &gv) in dx.data_mut().chunks_mut(p).zip(g.data()) {
                        chunk.fill(gv / denom);
                    }
                    self.acc(&mut grads, *x, Some(dx));
                }
                Op::Concat(xs) => {
                    let [n, ctot, h, w] = g.shape();
                    let p = h * w;
                    let mut off = 0;
                    for &v in xs {
                        let c = self.value(v).c();
                        if self.ng(v) {
                            let mut part = Vec::with_capacity(n * c * p);
                            for s in 0..n {
                                let base = s * ctot * p + off * p;
                                part.extend_from_slice(&g.data()[base..base + c * p]);
                            }
                            self.acc(&mut grads, v, Some(Tensor::from_vec([n, c, h, w], part)?));
                        }
                        off += c;
                    }
                }
                Op::Resize(x) => {
                    let [_, _, h, w] = self.value(*x).shape();
                    self.acc(&mut grads, *x, Some(kernels::resize_bilinear_backward(&g, h, w)));
                }
                Op::Norm { x, gamma, beta, sets, xhat, inv_std } => {
                    let shape = self.value(*x).shape();
                    let [_, c, h, w] = shape;
                    let p = h * w;
                    let gv = self.value(*gamma).data();
                    let gd = g.data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dgamma = Tensor::zeros([1, c, 1, 1]);
                        let mut dbeta = Tensor::zeros([1, c, 1, 1]);
                        for (i, (&d, &xh)) in gd.iter().zip(xhat).enumerate() {
                            let ch = (i / p) % c;
                            dgamma.data_mut()[ch] += d * xh;
                            dbeta.data_mut()[ch] += d;
                        }
                        self.acc(&mut grads, *gamma, Some(dgamma));
                        self.acc(&mut grads, *beta, Some(dbeta));
                    }
                    if self.ng(*x) {
                        let ranges = norm_ranges(*sets, shape)?;
                        let mut dx = Tensor::zeros(shape);
                        let dxd = dx.data_mut();
                        for (set, &is) in ranges.iter().zip(inv_std) {
                            let count = T::of(set.iter().map(|r| r.1).sum::<usize>() as f64);
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for &(s, l) in set {
                                for i in s..s + l {
                                    let dyh = gd[i] * gv[(i / p) % c];
                                    s1 += dyh;
                                    s2 += dyh * xhat[i];
                                }
                            }
                            for &(s, l) in set {
                                for i in s..s + l {
                                    let dyh = gd[i] * gv[(i / p) % c];
                                    dxd[i] = is / count * (count * dyh - s1 - xhat[i] * s2);
                                }
                            }
                        }
                        self.acc(&mut grads, *x, Some(dx));
                    }
                }
                Op::FrozenNorm { x, gamma, beta, mean, inv_std } => {
                    let xv = self.value(*x);
                    let [_, c, h, w] = xv.shape();
                    let p = h * w;
                    let gv = self.value(*gamma).data();
                    let gd = g.data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dgamma = Tensor::zeros([1, c, 1, 1]);
                        let mut dbeta = Tensor::zeros([1, c, 1, 1]);
                        for (i, (&d, &xi)) in gd.iter().zip(xv.data()).enumerate() {
                            let ch = (i / p) % c;
                            dgamma.data_mut()[ch] += d * (xi - mean[ch]) * inv_std[ch];
                            dbeta.data_mut()[ch] += d;
                        }
                        self.acc(&mut grads, *gamma, Some(dgamma));
                        self.acc(&mut grads, *beta, Some(dbeta));
                    }
                    if self.ng(*x) {
                        let mut dx = g.clone();
                        for (i, d) in dx.data_mut().iter_mut().enumerate() {
                            let ch = (i / p) % c;
                            *d *= inv_std[ch] * gv[ch];
                        }
                        self.acc(&mut grads, *x, Some(dx));
                    }
                }
                Op::ChannelMax { xs, arg } => {
                    for (k, &v) in xs.iter().enumerate() {
                        if !self.ng(v) {
                            continue;
                        }
                        let mut dx = Tensor::zeros(g.shape());
                        for ((d, &a), &gv) in dx.data_mut().iter_mut().zip(arg).zip(g.data()) {
                            if a as usize == k {
                                *d = gv;
                            }
                        }
                        self.acc(&mut grads, v, Some(dx));
                    }
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let m = labels.len();
                    let scale = g.data()[0] / T::of(m as f64);
                    let shape = self.value(logits[0]).shape();
                    for (k, &v) in logits.iter().enumerate() {
                        if !self.ng(v) {
                            continue;
                        }
                        let mut dx = Tensor::zeros(shape);
                        for (i, d) in dx.data_mut().iter_mut().enumerate() {
                            let ind = if labels[i] as usize == k { T::one() } else { T::zero() };
                            *d = (probs[k * m + i] - ind) * scale;
                        }
                        self.acc(&mut grads, v, Some(dx));
                    }
                }
                Op::Sum(xs) => {
                    for &v in xs {
                        self.acc(&mut grads, v, Some(g.clone()));
                    }
                }
            }
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
        let Some(g) = g else { return };
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_affine<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!("norm affine for {c} channels")));
    }
    Ok(())
}

fn norm_ranges(sets: NormSets, [n, c, h, w]: [usize; 4]) -> Result<Vec<Vec<(usize, usize)>>> {
    let p = h * w;
    Ok(match sets {
        NormSets::PerChannel => (0..c).map(|ch| (0..n).map(|s| ((s * c + ch) * p, p)).collect()).collect(),
        NormSets::PerGroup(groups) => {
            if groups == 0 || c % groups != 0 {
                return Err(Error::ShapeMismatch(format!("{c} channels into {groups} groups")));
            }
            let cg = c / groups;
            (0..n)
                .flat_map(|s| (0..groups).map(move |gi| vec![((s * c + gi * cg) * p, cg * p)]))
                .collect()
        }
    })
}

pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::new(store.len());
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / 2e-6;
        }
        g
    }

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Tensor<f64>) {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let out = build(&mut g, xv);
        let analytic = g.backward(out).unwrap().wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut f = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.variable(t.clone());
            let o = build(&mut g, v);
            g.value(o).data()[0]
        };
        let num = numeric(&mut f, &x);
        let err = analytic.max_abs_diff(&num);
        assert!(err < 1e-6, "max abs gradient error {err}");
    }

    /// Smooth scalar readout that depends on every element of `y`.
    fn readout(g: &mut Graph<f64>, y: Var) -> Var {
        let shape = g.value(y).shape();
        let w = g.constant(rand_tensor([1, shape[1], 1, 1], 99));
        let z = g.conv2d(y, w, None, ConvGeom::PLAIN).unwrap();
        let z = g.sigmoid(z);
        let m = g.spatial_mean(z);
        let zero = g.constant(Tensor::zeros(g.value(m).shape()));
        let labels = vec![0u32; shape[0]];
        g.softmax_ce(&[m, zero], &labels).unwrap()
    }

    #[test]
    fn conv_gradients() {
        for geom in [ConvGeom::PLAIN, ConvGeom::same3(1), ConvGeom::same3(2), ConvGeom { stride: 2, pad: 1, dilation: 1 }] {
            let k = if geom == ConvGeom::PLAIN { 1 } else { 3 };
            let w = rand_tensor([4, 3, k, k], 5);
            let b = rand_tensor([1, 4, 1, 1], 6);
            check(
                |g, x| {
                    let wv = g.constant(w.clone());
                    let bv = g.constant(b.clone());
                    let y = g.conv2d(x, wv, Some(bv), geom).unwrap();
                    readout(g, y)
                },
                rand_tensor([2, 3, 5, 6], 7),
            );
            // weight gradient
            let x = rand_tensor([2, 3, 5, 6], 8);
            check(
                |g, wv| {
                    let xv = g.constant(x.clone());
                    let y = g.conv2d(xv, wv, None, geom).unwrap();
                    readout(g, y)
                },
                w.clone(),
            );
        }
    }

    #[test]
    fn norm_gradients() {
        for sets in [NormSets::PerChannel, NormSets::PerGroup(2)] {
            let gamma = rand_tensor([1, 4, 1, 1], 1);
            let beta = rand_tensor([1, 4, 1, 1], 2);
            check(
                |g, x| {
                    let gv = g.constant(gamma.clone());
                    let bv = g.constant(beta.clone());
                    let (y, _, _) = g.norm(x, gv, bv, sets).unwrap();
                    readout(g, y)
                },
                rand_tensor([3, 4, 3, 2], 3),
            );
        }
        let x = rand_tensor([2, 3, 2, 2], 4);
        check(
            |g, gv| {
                let xv = g.constant(x.clone());
                let bv = g.constant(Tensor::zeros([1, 3, 1, 1]));
                let y = g.frozen_norm(xv, gv, bv, &[0.1, -0.2, 0.3], &[1.0, 2.0, 0.5]).unwrap();
                readout(g, y)
            },
            rand_tensor([1, 3, 1, 1], 5),
        );
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        let s = rand_tensor([2, 3, 1, 1], 11);
        check(
            |g, x| {
                let sv = g.constant(s.clone());
                let y = g.mul_broadcast(x, sv).unwrap();
                let y = g.relu(y);
                let up = g.resize(y, 5, 7);
                readout(g, up)
            },
            rand_tensor([2, 3, 3, 4], 12),
        );
        let x = rand_tensor([2, 3, 3, 4], 13);
        check(
            |g, sv| {
                let xv = g.constant(x.clone());
                let y = g.mul_broadcast(xv, sv).unwrap();
                readout(g, y)
            },
            rand_tensor([2, 1, 1, 1], 14),
        );
        check(
            |g, x| {
                let other = g.constant(rand_tensor([2, 2, 3, 3], 15));
                let cat = g.concat(&[other, x]).unwrap();
                readout(g, cat)
            },
            rand_tensor([2, 1, 3, 3], 16),
        );
    }

    #[test]
    fn channel_max_and_ce_gradients() {
        check(
            |g, x| {
                let a = g.constant(rand_tensor([2, 1, 3, 3], 21));
                let m = g.channel_max(&[a, x]).unwrap();
                let labels: Vec<u32> = (0..18).map(|i| (i % 3) as u32).collect();
                let b = g.constant(rand_tensor([2, 1, 3, 3], 22));
                g.softmax_ce(&[m, b, x], &labels).unwrap()
            },
            rand_tensor([2, 1, 3, 3], 23),
        );
    }

    #[test]
    fn channel_max_requires_children() {
        let mut g = Graph::<f32>::new();
        assert!(matches!(g.channel_max(&[]), Err(Error::EmptyChildSet)));
    }
}

//! Tape-based reverse-mode differentiation over the small set of layers the
//! segmentation networks need.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities below this (or above `1 - FOCAL_EPS`) are clamped before the log.
pub const FOCAL_EPS: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom, c_out: usize },
    BiasAdd { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Upsample { x: Var },
    Softmax { x: Var },
    WeightedSum { xs: Vec<Var>, w: Var },
    FocalLoss { probs: Var, labels: Vec<u8>, gamma: f64 },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, used to update
/// running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate operations performed by convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, weights {:?}",
                self.value(w).shape()
            )));
        }
        if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::Shape(format!("conv2d: kernel {kh} stride {stride} on {h}×{wd}")));
        }
        let geom = ConvGeom { c_in: c, h, w: wd, k: kh, stride, pad: padding };
        let out = kernels::conv2d_forward(self.value(x).data(), n, &geom, self.value(w).data(), o);
        self.macs += (n * o * geom.col_rows() * geom.out_h() * geom.out_w()) as u64;
        let t = Tensor::from_vec(&[n, o, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom, c_out: o }, rg))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).len() != c {
            return Err(Error::Shape(format!("bias length {} for {c} channels", self.value(b).len())));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / (h * w)) % c];
        }
        let _ = n;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::BiasAdd { x, b }, rg))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n == 0 {
            return Err(Error::Shape("batch norm over an empty batch".into()));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch norm: affine parameters do not match {c} channels")));
        }
        Ok((n, c, h * w))
    }

    /// Batch norm normalizing by the statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.check_bn(x, gamma, beta)?;
        let count = n * plane;
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let sl = &data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                mean[ch] += sl.iter().copied().sum::<T>();
            }
        }
        let inv_count = T::of(1.0 / count as f64);
        mean.iter_mut().for_each(|m| *m *= inv_count);
        for s in 0..n {
            for ch in 0..c {
                let sl = &data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                var[ch] += sl.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        let unbiased_scale = if count > 1 { T::of(1.0 / (count - 1) as f64) } else { T::one() };
        let unbiased: Vec<T> = var.iter().map(|&v| v * unbiased_scale).collect();
        var.iter_mut().for_each(|v| *v *= inv_count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true, n, c, plane)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, plane) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batch norm: running statistics do not match channels".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        self.normalize(x, gamma, beta, running_mean, &inv_std, false, n, c, plane)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        train: bool,
        n: usize,
        c: usize,
        plane: usize,
    ) -> Result<Var> {
        let data = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train };
        Ok(self.push(Tensor::from_vec(&shape, out)?, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (vals, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, k, stride, padding);
        let oh = kernels::conv_out_dim(h, k, stride, padding);
        let ow = kernels::conv_out_dim(w, k, stride, padding);
        let t = Tensor::from_vec(&[n, c, oh, ow], vals)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Bilinear resize to `out_h × out_w` with half-pixel-centre alignment.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h < h || out_w < w {
            return Err(Error::Shape(format!("upsample target {out_h}×{out_w} smaller than {h}×{w}")));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let t = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample { x }, rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::softmax_channels(self.value(x).data(), n, c, h * w);
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// `Σ_i w[i] · xs[i]` where `w` is a vector with one entry per input.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        if xs.is_empty() || self.value(w).len() != xs.len() {
            return Err(Error::Shape(format!(
                "weighted sum: {} inputs, {} weights",
                xs.len(),
                self.value(w).len()
            )));
        }
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "weighted sum")?;
        }
        let weights = self.value(w).data().to_vec();
        let mut out = Tensor::zeros(self.value(xs[0]).shape());
        for (&x, &wi) in xs.iter().zip(&weights) {
            for (o, &v) in out.data_mut().iter_mut().zip(self.value(x).data()) {
                *o += wi * v;
            }
        }
        let rg = self.rg(w) || xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::WeightedSum { xs: xs.to_vec(), w }, rg))
    }

    /// Mean over pixels of `-(1 - p_t)^γ · ln p_t`, with `p_t` the probability
    /// of the labelled class clamped to `[1e-7, 1 - 1e-7]`.
    pub fn focal_loss(&mut self, probs: Var, labels: &[u8], gamma: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(probs).dims4()?;
        if labels.len() != n * h * w {
            return Err(Error::Shape(format!("focal loss: {} labels for {n}×{h}×{w} pixels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Shape(format!("focal loss: label {bad} with {c} classes")));
        }
        let value = focal_loss_value(self.value(probs).data(), labels, n, c, h * w, gamma);
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(T::of(value)), Op::FocalLoss { probs, labels: labels.to_vec(), gamma }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Gradients of `loss` with respect to every recorded value. Parameter
    /// gradients are also added into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(Tensor::from_vec(self.value(v).shape(), d)?),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom, c_out } => {
                let n = self.value(*x).shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    *c_out,
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw)?;
                }
            }
            Op::BiasAdd { x, b } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let mut db = vec![T::zero(); c];
                for (k, &v) in gd.iter().enumerate() {
                    db[(k / (h * w)) % c] += v;
                }
                self.accumulate(grads, *x, gd.to_vec())?;
                self.accumulate(grads, *b, db)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let count = T::of((n * plane) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for k in off..off + plane {
                            dbeta[ch] += gd[k];
                            dgamma[ch] += gd[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + plane {
                                dx[k] = if *train {
                                    scale * (gd[k] - dbeta[ch] / count - xhat[k] * dgamma[ch] / count)
                                } else {
                                    scale * gd[k]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(gd) {
                    dx[src] += d;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&gd[base..base + ca * plane]);
                    db.extend_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.to_vec())?;
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&d, &v)| d * v).collect())?;
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(&d, &v)| d * v).collect())?;
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = g.dims4()?;
                let dx = kernels::bilinear_backward(gd, n * c, h, w, oh, ow);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Softmax { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); y.len()];
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot += gd[base + ch * plane + p] * y[base + ch * plane + p];
                        }
                        for ch in 0..c {
                            let k = base + ch * plane + p;
                            dx[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::WeightedSum { xs, w } => {
                let weights = self.value(*w).data().to_vec();
                let mut dw = vec![T::zero(); xs.len()];
                for (l, &x) in xs.iter().enumerate() {
                    dw[l] = gd.iter().zip(self.value(x).data()).map(|(&d, &v)| d * v).sum();
                    self.accumulate(grads, x, gd.iter().map(|&d| d * weights[l]).collect())?;
                }
                self.accumulate(grads, *w, dw)?;
            }
            Op::FocalLoss { probs, labels, gamma } => {
                let (n, c, h, w) = self.value(*probs).dims4()?;
                let plane = h * w;
                let upstream = gd[0];
                let pv = self.value(*probs).data();
                let mut dp = vec![T::zero(); pv.len()];
                let inv_count = 1.0 / (n * plane) as f64;
                for s in 0..n {
                    for p in 0..plane {
                        let label = labels[s * plane + p] as usize;
                        let k = (s * c + label) * plane + p;
                        let pt = pv[k].as_f64();
                        if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&pt) {
                            continue;
                        }
                        let d = focal_derivative(pt, *gamma) * inv_count;
                        dp[k] = upstream * T::of(d);
                    }
                }
                self.accumulate(grads, *probs, dp)?;
            }
            Op::Sum { x } => {
                let upstream = gd[0];
                self.accumulate(grads, *x, vec![upstream; self.value(*x).len()])?;
            }
        }
        Ok(())
    }
}

/// d/dp of `-(1-p)^γ ln p`.
fn focal_derivative(p: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let modulating = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
    modulating - q.powf(gamma) / p
}

/// Focal loss over an `N×C×H×W` probability buffer with integer labels.
pub fn focal_loss_value<T: Scalar>(probs: &[T], labels: &[u8], n: usize, c: usize, plane: usize, gamma: f64) -> f64 {
    let mut total = 0.0;
    for s in 0..n {
        for p in 0..plane {
            let label = labels[s * plane + p] as usize;
            let pt = probs[(s * c + label) * plane + p].as_f64().clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            total += -(1.0 - pt).powf(gamma) * pt.ln();
        }
    }
    total / (n * plane).max(1) as f64
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

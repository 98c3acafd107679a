//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always have smaller indices,
//! so the tape order is a topological order of the graph and [`Tape::backward`] is a single
//! reverse sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Relu { x: Var },
    InstanceNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AvgPool3 { x: Var, stride: usize },
    MaxPool3 { x: Var, argmax: Vec<u32> },
    Subsample { x: Var, stride: usize },
    UpNearest { x: Var, factor: usize },
    UpBilinear { x: Var, factor: usize },
    AddN { xs: Vec<Var> },
    ScaleBy { x: Var, w: Var, index: usize },
    Softmax { x: Var },
    Concat { xs: Vec<Var> },
    MaskChannels { x: Var, keep: Vec<bool> },
    Sum { x: Var },
    Dot { x: Var, weights: Vec<T> },
    CrossEntropy { logits: Var, target: Vec<u8>, weights: Vec<T>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu { .. } => "relu",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::AvgPool3 { .. } => "avg_pool3",
            Op::MaxPool3 { .. } => "max_pool3",
            Op::Subsample { .. } => "subsample",
            Op::UpNearest { .. } => "upsample_nearest",
            Op::UpBilinear { .. } => "upsample_bilinear",
            Op::AddN { .. } => "add",
            Op::ScaleBy { .. } => "scale_by",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::MaskChannels { .. } => "mask_channels",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn aux_bytes(&self) -> usize
    where
        T: Real,
    {
        match self {
            Op::InstanceNorm { xhat, inv_std, .. } => (xhat.len() + inv_std.len()) * T::BYTES,
            Op::MaxPool3 { argmax, .. } => argmax.len() * 4,
            Op::CrossEntropy { target, probs, .. } => target.len() + probs.len() * T::BYTES,
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar w.r.t. every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn bytes(&self) -> usize {
        self.grads.iter().flatten().map(|g| g.bytes()).sum()
    }
}

fn mismatch(id: usize, op: &str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: format!("node {id} ({op})"),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Bytes held by node values and their saved backward state.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.bytes() + n.op.aux_bytes()).sum()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn dims4(&self, v: Var, op: &str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        match *s {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(mismatch(self.next_id(), op, &[0, 0, 0, 0], s)),
        }
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let id = self.next_id();
        let xd = self.dims4(x, "conv2d input")?;
        let wd = self.dims4(w, "conv2d weight")?;
        let (cout, cpg) = (wd[0], wd[1]);
        if geom.groups == 0 || cout % geom.groups != 0 || cpg * geom.groups != xd[1] {
            return Err(mismatch(id, "conv2d", &[cout, xd[1] / geom.groups.max(1), wd[2], wd[3]], &wd));
        }
        if geom.out_hw(xd[2], xd[3], wd[2], wd[3]).is_none() {
            return Err(mismatch(id, "conv2d spatial", &[wd[2], wd[3]], &xd));
        }
        let (out, od) = kernels::conv2d_forward(self.value(x).data(), xd, self.value(w).data(), wd, geom);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv2d { x, w, geom }, Tensor::new(&od, out)?, rg))
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xd = self.dims4(x, "channel_bias")?;
        if self.shape(b) != [xd[1]] {
            return Err(mismatch(self.next_id(), "channel_bias", &[xd[1]], self.shape(b)));
        }
        let hw = xd[2] * xd[3];
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = bias[p % xd[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::ChannelBias { x, b }, Tensor::new(&xd, out)?, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu { x }, y, rg)
    }

    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xd = self.dims4(x, "instance_norm")?;
        for p in [scale, shift] {
            if self.shape(p) != [xd[1]] {
                return Err(mismatch(self.next_id(), "instance_norm affine", &[xd[1]], self.shape(p)));
            }
        }
        let (y, xhat, inv_std) = kernels::instance_norm_forward(
            self.value(x).data(),
            xd,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            Tensor::new(&xd, y)?,
            rg,
        ))
    }

    pub fn avg_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xd = self.dims4(x, "avg_pool3")?;
        let (out, od) = kernels::avg_pool3_forward(self.value(x).data(), xd, stride.max(1));
        let rg = self.rg(x);
        Ok(self.push(Op::AvgPool3 { x, stride: stride.max(1) }, Tensor::new(&od, out)?, rg))
    }

    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xd = self.dims4(x, "max_pool3")?;
        let (out, argmax, od) = kernels::max_pool3_forward(self.value(x).data(), xd, stride.max(1));
        let rg = self.rg(x);
        Ok(self.push(
            Op::MaxPool3 {
                x,
                argmax,
            },
            Tensor::new(&od, out)?,
            rg,
        ))
    }

    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride <= 1 {
            return Ok(x);
        }
        let xd = self.dims4(x, "subsample")?;
        let (out, od) = kernels::subsample_forward(self.value(x).data(), xd, stride);
        let rg = self.rg(x);
        Ok(self.push(Op::Subsample { x, stride }, Tensor::new(&od, out)?, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor <= 1 {
            return Ok(x);
        }
        let xd = self.dims4(x, "upsample_nearest")?;
        let (out, od) = kernels::upsample_nearest_forward(self.value(x).data(), xd, factor);
        let rg = self.rg(x);
        Ok(self.push(Op::UpNearest { x, factor }, Tensor::new(&od, out)?, rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor <= 1 {
            return Ok(x);
        }
        let xd = self.dims4(x, "upsample_bilinear")?;
        let (out, od) = kernels::upsample_bilinear_forward(self.value(x).data(), xd, factor);
        let rg = self.rg(x);
        Ok(self.push(Op::UpBilinear { x, factor }, Tensor::new(&od, out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| crate::error::invalid("add of an empty list"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        let mut out = self.value(first).data().to_vec();
        for &v in &xs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(mismatch(self.next_id(), "add", &shape, self.shape(v)));
            }
            for (o, &b) in out.iter_mut().zip(self.value(v).data()) {
                *o += b;
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Op::AddN { xs: xs.to_vec() }, Tensor::new(&shape, out)?, rg))
    }

    /// `x * w[index]` with `w` a rank-1 tensor.
    pub fn scale_by(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        if self.shape(w).len() != 1 || index >= self.value(w).len() {
            return Err(mismatch(self.next_id(), "scale_by weights", &[index + 1], self.shape(w)));
        }
        let s = self.value(w).data()[index];
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::ScaleBy { x, w, index }, y, rg))
    }

    /// Softmax of a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 || self.value(x).is_empty() {
            return Err(mismatch(self.next_id(), "softmax", &[1], self.shape(x)));
        }
        let y = Tensor::new(self.shape(x), softmax(self.value(x).data()))?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x }, y, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| crate::error::invalid("concat of an empty list"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let [n, _, h, w] = self.dims4(first, "concat")?;
        let mut channels = 0;
        for &v in xs {
            let d = self.dims4(v, "concat")?;
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(mismatch(self.next_id(), "concat", &[n, d[1], h, w], &d));
            }
            channels += d[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, Tensor::new(&[n, channels, h, w], out)?, rg))
    }

    /// Multiplies channel `c` by 1 where `keep[c]` and by 0 elsewhere.
    pub fn mask_channels(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xd = self.dims4(x, "mask_channels")?;
        if keep.len() != xd[1] {
            return Err(mismatch(self.next_id(), "mask_channels", &[xd[1]], &[keep.len()]));
        }
        let hw = xd[2] * xd[3];
        let mut out = self.value(x).data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let m = if keep[p % xd[1]] { T::one() } else { T::zero() };
            chunk.iter_mut().for_each(|v| *v = *v * m);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::MaskChannels {
                x,
                keep: keep.to_vec(),
            },
            Tensor::new(&xd, out)?,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    /// `sum(x * weights)` against a constant weight buffer.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(mismatch(self.next_id(), "dot", self.shape(x), &[weights.len()]));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Op::Dot { x, weights }, Tensor::scalar(s), rg))
    }

    /// Class-weighted pixel cross-entropy averaged over all pixels.
    ///
    /// `logits` is `(N, K, H, W)`, `target` holds one class index per pixel in `(N, H, W)`
    /// order and `class_weights` has `K` entries.
    pub fn weighted_cross_entropy(&mut self, logits: Var, target: &[u8], class_weights: &[T]) -> Result<Var> {
        let [n, k, h, w] = self.dims4(logits, "cross_entropy")?;
        let id = self.next_id();
        if target.len() != n * h * w {
            return Err(mismatch(id, "cross_entropy target", &[n, h, w], &[target.len()]));
        }
        if class_weights.len() != k {
            return Err(mismatch(id, "cross_entropy weights", &[k], &[class_weights.len()]));
        }
        if let Some(&t) = target.iter().find(|&&t| t as usize >= k) {
            return Err(crate::error::invalid(format!("target class {t} out of range for {k} classes")));
        }
        let x = self.value(logits);
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("node {id} (cross_entropy logits)")));
        }
        let hw = h * w;
        let xs = x.data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let at = |c: usize| (b * k + c) * hw + p;
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(xs[at(c)]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xs[at(c)] - mx).exp_libm();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / z;
                }
                let t = target[b * hw + p] as usize;
                let logp = xs[at(t)] - mx - z.ln_libm();
                total += -class_weights[t] * logp;
            }
        }
        let loss = total / T::of((n * hw) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward(format!("node {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(mismatch(loss.0, "backward loss", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let g = g.data();
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, lo: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut lo[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v), delta).expect("gradient matches value shape"));
            }
        }
    }

    fn dims(&self, v: Var) -> [usize; 4] {
        let s = self.shape(v);
        [s[0], s[1], s[2], s[3]]
    }

    fn propagate(&self, node: &Node<T>, g: &[T], lo: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.dims(*x),
                    self.value(*w).data(),
                    self.dims(*w),
                    *geom,
                    g,
                );
                self.accumulate(lo, *x, gx);
                self.accumulate(lo, *w, gw);
            }
            Op::ChannelBias { x, b } => {
                let [_, c, h, w] = self.dims(*x);
                let mut gb = vec![T::zero(); c];
                for (p, chunk) in g.chunks(h * w).enumerate() {
                    gb[p % c] += chunk.iter().copied().sum::<T>();
                }
                self.accumulate(lo, *x, g.to_vec());
                self.accumulate(lo, *b, gb);
            }
            Op::Relu { x } => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(lo, *x, gx);
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (gx, gs, gb) =
                    kernels::instance_norm_backward(self.dims(*x), self.value(*scale).data(), xhat, inv_std, g);
                self.accumulate(lo, *x, gx);
                self.accumulate(lo, *scale, gs);
                self.accumulate(lo, *shift, gb);
            }
            Op::AvgPool3 { x, stride } => {
                let gx = kernels::avg_pool3_backward(self.dims(*x), *stride, g);
                self.accumulate(lo, *x, gx);
            }
            Op::MaxPool3 { x, argmax, .. } => {
                let od = node.value.shape();
                let gx = kernels::max_pool3_backward(self.dims(*x), [od[0], od[1], od[2], od[3]], argmax, g);
                self.accumulate(lo, *x, gx);
            }
            Op::Subsample { x, stride } => {
                let gx = kernels::subsample_backward(self.dims(*x), *stride, g);
                self.accumulate(lo, *x, gx);
            }
            Op::UpNearest { x, factor } => {
                let gx = kernels::upsample_nearest_backward(self.dims(*x), *factor, g);
                self.accumulate(lo, *x, gx);
            }
            Op::UpBilinear { x, factor } => {
                let gx = kernels::upsample_bilinear_backward(self.dims(*x), *factor, g);
                self.accumulate(lo, *x, gx);
            }
            Op::AddN { xs } => {
                for &v in xs {
                    self.accumulate(lo, v, g.to_vec());
                }
            }
            Op::ScaleBy { x, w, index } => {
                let s = self.value(*w).data()[*index];
                self.accumulate(lo, *x, g.iter().map(|&gv| gv * s).collect());
                let mut gw = vec![T::zero(); self.value(*w).len()];
                gw[*index] = self.value(*x).data().iter().zip(g).map(|(&a, &b)| a * b).sum();
                self.accumulate(lo, *w, gw);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                let gx = y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                self.accumulate(lo, *x, gx);
            }
            Op::Concat { xs } => {
                let od = node.value.shape();
                let (n, ctot, hw) = (od[0], od[1], od[2] * od[3]);
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * ctot + offset) * hw;
                        gx.extend_from_slice(&g[start..start + c * hw]);
                    }
                    self.accumulate(lo, v, gx);
                    offset += c;
                }
            }
            Op::MaskChannels { x, keep } => {
                let [_, c, h, w] = self.dims(*x);
                let mut gx = g.to_vec();
                for (p, chunk) in gx.chunks_mut(h * w).enumerate() {
                    let m = if keep[p % c] { T::one() } else { T::zero() };
                    chunk.iter_mut().for_each(|v| *v = *v * m);
                }
                self.accumulate(lo, *x, gx);
            }
            Op::Sum { x } => {
                self.accumulate(lo, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Dot { x, weights } => {
                self.accumulate(lo, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::CrossEntropy {
                logits,
                target,
                weights,
                probs,
            } => {
                let [n, k, h, w] = self.dims(*logits);
                let hw = h * w;
                let scale = g[0] / T::of((n * hw) as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let t = target[b * hw + p] as usize;
                        let wt = weights[t] * scale;
                        for c in 0..k {
                            let at = (b * k + c) * hw + p;
                            let ind = if c == t { T::one() } else { T::zero() };
                            gx[at] = wt * (probs[at] - ind);
                        }
                    }
                }
                self.accumulate(lo, *logits, gx);
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - mx).exp_libm()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Human-readable description of a node, for diagnostics.
pub fn describe<T: Real>(tape: &Tape<T>, v: Var) -> String {
    format!("node {} ({}) shape {:?}", v.0, tape.op_name(v), tape.shape(v))
}

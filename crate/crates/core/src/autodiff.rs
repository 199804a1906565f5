//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitive applications in execution order, so the
//! tape is already a topological order: `backward` walks it once in reverse.
//! Values are plain [`Tensor`]s; [`Var`] is an index into the tape.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::{broadcast_shape, broadcast_strides, strided_walk, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    /// Zero padding on every spatial border. `None` means "same" padding
    /// (`k / 2`), which preserves extents for odd kernels at stride 1.
    pub padding: Option<usize>,
    pub groups: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: None,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    BroadcastTo(Var),
    Sum { x: Var, count: usize, mean: bool },
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample2x(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mode: BatchNormMode },
    NormLast { x: Var, group: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SelectRows { x: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics recorded by a training-mode batch normalization, used
/// to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    bn_stats: HashMap<Var, BatchStats>,
}

impl Graph {
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

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf whose gradient is tracked but which is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf for the named parameter in `store`. Repeated requests for the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let trainable = store.is_trainable(name);
        let v = self.push_leaf(p.clone(), trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named trainable parameters referenced by this graph.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn batch_stats(&self, bn_output: Var) -> Option<&BatchStats> {
        self.bn_stats.get(&bn_output)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("output of {name} at flat index {i}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast_pair(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b)))
        })?;
        let a = self.broadcast_to(a, &shape)?;
        let b = self.broadcast_to(b, &shape)?;
        Ok((a, b))
    }

    /// Elementwise add with numpy-style broadcasting.
    pub fn add_bc(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        self.add(a, b)
    }

    pub fn sub_bc(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("sub", a, b)?;
        self.sub(a, b)
    }

    pub fn mul_bc(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        self.mul(a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push("affine", shape, data, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, data, Op::Relu(x), &[x])
    }

    /// Logistic sigmoid. Outputs are clamped to the open interval (0, 1) so
    /// that saturated inputs never produce an exact 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        let data = self
            .data(x)
            .iter()
            .map(|&v| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                s.clamp(f64::MIN_POSITIVE, HI)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", shape, data, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push("abs", shape, data, Op::Abs(x), &[x])
    }

    /// Matrix product of `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, vec![m, n]),
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => (ba, m, k, n, vec![ba, m, n]),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push("matmul", out_shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for shape {shape:?}")));
        }
        let strides = strides_of(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        strided_walk(&out_shape, &src, |o, s| out[o] = d[s]);
        self.push("permute", out_shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let strides = broadcast_strides(self.shape(x), shape)
            .ok_or_else(|| Error::shape("broadcast", format!("{:?} -> {shape:?}", self.shape(x))))?;
        let d = self.data(x);
        let mut out = vec![0.0; shape.iter().product()];
        strided_walk(shape, &strides, |o, s| out[o] = d[s]);
        self.push("broadcast", shape.to_vec(), out, Op::BroadcastTo(x), &[x])
    }

    fn reduce(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape("sum", format!("axis {a} for shape {shape:?}")));
        }
        let mut kept = shape.clone();
        for &a in axes {
            kept[a] = 1;
        }
        let count = shape.iter().product::<usize>() / kept.iter().product::<usize>();
        let strides = broadcast_strides(&kept, &shape).expect("kept dims broadcast");
        let d = self.data(x);
        let mut out = vec![0.0; kept.iter().product()];
        strided_walk(&shape, &strides, |i, o| out[o] += d[i]);
        if mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let r = self.push(if mean { "mean" } else { "sum" }, kept.clone(), out, Op::Sum { x, count, mean }, &[x])?;
        if keepdim {
            Ok(r)
        } else {
            let squeezed: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            self.reshape(r, &squeezed)
        }
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, true)
    }

    /// Softmax over the last axis. The row maximum is subtracted before
    /// exponentiation.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.data(x).to_vec();
        for r in out.chunks_mut(row) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            r.iter_mut().for_each(|v| *v /= s);
        }
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Softmax over an arbitrary axis.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let r = self.shape(x).len();
        if axis >= r {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {r}")));
        }
        if axis == r - 1 {
            return self.softmax(x);
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(axis, r - 1);
        let t = self.permute(x, &perm)?;
        let s = self.softmax(t)?;
        self.permute(s, &perm)
    }

    /// 2-D convolution over `[n, c, h, w]` with weights `[o, c / groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, c_in, h, wd], &[c_out, cg, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if attrs.stride == 0 || attrs.groups == 0 || c_in % attrs.groups != 0 || c_out % attrs.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("stride {} groups {} for {c_in}->{c_out} channels", attrs.stride, attrs.groups),
            ));
        }
        if cg != c_in / attrs.groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {cg} input channels per group, input has {}", c_in / attrs.groups),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let pad = attrs.padding.unwrap_or(kh / 2);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{wd}")));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: attrs.stride,
            pad,
            groups: attrs.groups,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let shape = vec![n, c_out, geom.h_out(), geom.w_out()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", shape, out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Non-overlapping `k x k` max pooling over `[n, c, h, w]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, h, w] = s.as_slice() else {
            return Err(Error::shape("max_pool2d", format!("input {s:?}")));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("max_pool2d", format!("window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let d = self.data(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push("max_pool2d", vec![n, c, ho, wo], out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Nearest-neighbour x2 upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", format!("input {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product::<usize>();
        let d = self.data(x);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        self.push("upsample2x", shape, out, Op::Upsample2x(x), &[x])
    }

    /// Batch normalization over `[n, c, ...]`, per channel across batch and
    /// trailing axes. In `Eval` mode `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let count = (n * inner) as f64;
        let d = self.data(x);
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let sl = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        mean[ch] += sl.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let sl = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                        var[ch] += sl.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
            BatchNormMode::Eval => {
                let (m, v) = running.ok_or_else(|| Error::contract("eval batch_norm needs running statistics"))?;
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats for {} channels, input has {c}", m.len())));
                }
                (m.to_vec(), v.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let v = self.push(
            "batch_norm",
            s,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode },
            &[x, gamma, beta],
        )?;
        if mode == BatchNormMode::Train {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let var = var.iter().map(|v| v * unbias).collect();
            self.bn_stats.insert(v, BatchStats { mean, var });
        }
        Ok(v)
    }

    /// Zero-mean, unit-variance normalization over the last `trailing` axes
    /// (layer norm for `trailing = 1`, per-channel instance norm for
    /// `trailing = 2` on `[n, c, h, w]`). No affine part.
    pub fn norm_trailing(&mut self, x: Var, trailing: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if trailing == 0 || trailing > s.len() {
            return Err(Error::shape("norm_trailing", format!("{trailing} axes of {s:?}")));
        }
        let group: usize = s[s.len() - trailing..].iter().product();
        let d = self.data(x);
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(d.len() / group);
        for (row, out) in d.chunks(group).zip(xhat.chunks_mut(group)) {
            let m = row.iter().sum::<f64>() / group as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / group as f64;
            let is = 1.0 / (v + eps).sqrt();
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - m) * is;
            }
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push("norm_trailing", s, out, Op::NormLast { x, group, xhat, inv_std }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Gathers rows along axis 0; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("select_rows", format!("indices {indices:?} into {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        self.push("select_rows", shape, out, Op::SelectRows { x, indices: indices.to_vec() }, &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
                .collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * db[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * da[i];
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g)),
            Op::Relu(x) => {
                let d = self.data(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if d[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let d = self.data(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if d[i] > 0.0 {
                            s[i] += g[i];
                        } else if d[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |s| {
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            true,
                            &mut s[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(b, &mut |s| {
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &da[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut s[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Permute { x, perm } => {
                // out[o] = in[s]  =>  gin[s] += g[o]
                let in_shape = self.shape(*x);
                let strides = strides_of(in_shape);
                let out_shape = node.value.shape();
                let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                acc(*x, &mut |s| strided_walk(out_shape, &src, |o, i| s[i] += g[o]));
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::BroadcastTo(x) => {
                let strides = broadcast_strides(self.shape(*x), node.value.shape()).expect("validated in forward");
                acc(*x, &mut |s| strided_walk(node.value.shape(), &strides, |o, i| s[i] += g[o]));
            }
            &Op::Sum { x, count, mean } => {
                let kept = node.value.shape();
                let full = self.shape(x);
                let strides = broadcast_strides(kept, full).expect("kept dims broadcast");
                let w = if mean { 1.0 / count as f64 } else { 1.0 };
                acc(x, &mut |s| strided_walk(full, &strides, |i, o| s[i] += w * g[o]));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let row = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(row).zip(y.chunks(row)).zip(g.chunks(row)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..row {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::Conv2d { x, w, b, ref geom } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    self.data(x),
                    self.data(w),
                    g,
                    wants(x),
                    wants(w),
                    b.map(wants).unwrap_or(false),
                );
                if let Some(dx) = cg.dx {
                    acc(x, &mut |s| s.iter_mut().zip(&dx).for_each(|(s, d)| *s += d));
                }
                if let Some(dw) = cg.dw {
                    acc(w, &mut |s| s.iter_mut().zip(&dw).for_each(|(s, d)| *s += d));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(b, &mut |s| s.iter_mut().zip(&db).for_each(|(s, d)| *s += d));
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |s| {
                for (o, &i) in argmax.iter().enumerate() {
                    s[i] += g[o];
                }
            }),
            Op::Upsample2x(x) => {
                let sh = self.shape(*x);
                let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                let planes = sh[..sh.len() - 2].iter().product::<usize>();
                acc(*x, &mut |s| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                let sh = self.shape(*x);
                let (n, c) = (sh[0], sh[1]);
                let inner: usize = sh[2..].iter().product();
                let gd = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, d)| *s += d));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, d)| *s += d));
                let m = (n * inner) as f64;
                acc(*x, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch];
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                s[i] += match mode {
                                    BatchNormMode::Train => {
                                        k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                    }
                                    BatchNormMode::Eval => k * g[i],
                                };
                            }
                        }
                    }
                });
            }
            Op::NormLast { x, group, xhat, inv_std } => {
                let group = *group;
                acc(*x, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * group..(r + 1) * group];
                        let rx = &xhat[r * group..(r + 1) * group];
                        let mg = rg.iter().sum::<f64>() / group as f64;
                        let mgx = rg.iter().zip(rx).map(|(a, b)| a * b).sum::<f64>() / group as f64;
                        for j in 0..group {
                            s[r * group + j] += is * (rg[j] - mg - rx[j] * mgx);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[axis] * inner;
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            s[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = self.shape(x);
                let len = node.value.shape()[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                acc(x, &mut |s| {
                    for o in 0..outer {
                        let base = (o * in_shape[axis] + start) * inner;
                        s[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::SelectRows { x, indices } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                acc(*x, &mut |s| {
                    for (o, &i) in indices.iter().enumerate() {
                        s[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter in `store`. Parameters the loss
    /// does not reach (or that the graph never used) get zeros.
    pub fn for_params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let used: HashMap<&str, Var> = self.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        store
            .trainable_names()
            .map(|name| {
                let g = used
                    .get(name)
                    .and_then(|v| self.wrt(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(name).unwrap().shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Compares analytic gradients against central differences for one
/// parameter. `build` records the loss on a fresh graph from the store.
///
/// Returns the maximum over sampled coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`. When the
/// parameter has more than `max_coords` entries, an evenly strided subset is
/// checked.
pub fn finite_diff_check<F>(store: &ParamStore, param: &str, epsilon: f64, max_coords: usize, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_steps(store, param, &[epsilon], max_coords, build)
}

/// Like [`finite_diff_check`], but each coordinate is scored by the best of
/// several central-difference step sizes, for losses with ReLU or
/// absolute-value kinks.
pub fn finite_diff_check_steps<F>(store: &ParamStore, param: &str, epsilons: &[f64], max_coords: usize, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if epsilons.is_empty() || epsilons.iter().any(|&e| !(e > 0.0 && e <= 1e-2)) {
        return Err(Error::contract(format!("finite-difference steps {epsilons:?} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.for_params(store).remove(param).ok_or_else(|| {
        Error::contract(format!("`{param}` is not a trainable parameter"))
    })?;
    let n = analytic.numel();
    let step = n.div_ceil(max_coords.max(1)).max(1);
    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(step) {
        let orig = store.get(param).unwrap().data()[i];
        let a = analytic.data()[i];
        let mut best = f64::INFINITY;
        for &epsilon in epsilons {
            probe.get_mut(param).unwrap().data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(param).unwrap().data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(param).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            best = best.min((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

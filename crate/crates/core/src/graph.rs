//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::metrics::{ssim_planar, SsimConfig};
use crate::params::ParamStore;
use crate::tensor::{conv2d, conv2d_backward, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelAffine {
        input: Var,
        scale: Vec<f64>,
    },
    MaxRgb {
        input: Var,
        argmax: Vec<u8>,
    },
    AdaptiveMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    SpatialStd {
        input: Var,
        mean: Vec<f64>,
    },
    Concat(Vec<Var>),
    MeanAll(Var),
    NormInNorm {
        preds: Var,
        targets: Vec<f64>,
    },
    Ssim {
        input: Var,
        reference: Tensor,
        config: SsimConfig,
    },
    AbsDiff {
        input: Var,
        target: f64,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Numerical floor used by the std pooling and the normalized regression loss.
pub const EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Parameters of a [`ParamStore`] bound into a graph, indexed like the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every tensor of `store` as a leaf; frozen stores get no gradients.
    pub fn bind(&mut self, store: &'a ParamStore, trainable: bool) -> Bound {
        let vars = store.tensors().map(|t| self.borrowed(t, trainable)).collect();
        Bound { vars }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `weight (out, in) * input (in) + bias (out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let ws = w.shape();
        if ws.len() != 2 || ws[1] != x.len() || b.len() != ws[0] {
            return Err(Error::Shape(format!(
                "linear: weight {:?}, input {}, bias {}",
                ws,
                x.len(),
                b.len()
            )));
        }
        let mut out = b.data().to_vec();
        crate::tensor::gemm(ws[0], ws[1], 1, w.data(), false, x.data(), false, 1.0, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::vector(out), Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Logistic function kept strictly inside (0, 1) even where f64 would round
    /// to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let squash = |v: f64| logistic(v).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| squash(v)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * factor).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Per-channel `x * scale[c] + shift[c]` on a CHW tensor.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!("channel_affine: {c} channels, {} scales", scale.len())));
        }
        let mut out = t.clone();
        for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v * scale[ci] + shift[ci]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                input: x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Per-pixel maximum over the three colour planes, shape `(1, H, W)`.
    pub fn max_rgb(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        if c != 3 {
            return Err(Error::Shape(format!("max_rgb needs 3 channels, got {c}")));
        }
        let n = h * w;
        let d = t.data();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for p in 0..n {
            let mut best = 0u8;
            for ch in 1..3u8 {
                if d[ch as usize * n + p] > d[best as usize * n + p] {
                    best = ch;
                }
            }
            argmax.push(best);
            out.push(d[best as usize * n + p]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[1, h, w], out)?, Op::MaxRgb { input: x, argmax }, rg))
    }

    /// Adaptive max pooling of a CHW map to exactly `out_h x out_w`.
    pub fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Shape(format!("cannot pool {h}x{w} to {out_h}x{out_w}")));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        let mut argmax = Vec::with_capacity(out.capacity());
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut best = ch * h * w + y0 * w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = ch * h * w + y * w + xx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(d[best]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[c, out_h, out_w], out)?,
            Op::AdaptiveMaxPool { input: x, argmax },
            rg,
        ))
    }

    /// Per-channel spatial mean, `(C, H, W) -> (C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, h, w) = t.chw();
        let n = (h * w) as f64;
        let out = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::SpatialMean(x), rg)
    }

    /// Per-channel population standard deviation `sqrt(var + EPS)`.
    pub fn spatial_std(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, h, w) = t.chw();
        let n = (h * w) as f64;
        let mut mean = Vec::new();
        let mut out = Vec::new();
        for p in t.data().chunks(h * w) {
            let m = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            out.push((var + EPS).sqrt());
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::SpatialStd { input: x, mean }, rg)
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Normalized regression loss between a prediction vector and fixed targets.
    pub fn norm_in_norm(&mut self, preds: Var, targets: &[f64]) -> Result<Var> {
        let p = self.value(preds).data();
        let loss = norm_in_norm_value(p, targets)?;
        let rg = self.rg(preds);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NormInNorm {
                preds,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean SSIM between `x` and a constant reference, both `(3, H, W)`.
    pub fn ssim(&mut self, x: Var, reference: &Tensor, config: SsimConfig) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "ssim: {:?} vs {:?}",
                t.shape(),
                reference.shape()
            )));
        }
        let (_, h, w) = t.chw();
        let (value, _) = ssim_planar(t.data(), reference.data(), h, w, &config, false)?;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Ssim {
                input: x,
                reference: reference.clone(),
                config,
            },
            rg,
        ))
    }

    /// `|target - x|` for a scalar `x`.
    pub fn abs_diff(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x).item();
        let rg = self.rg(x);
        self.push(Tensor::scalar((target - v).abs()), Op::AbsDiff { input: x, target }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[idx].value.get();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *geom,
                    g,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (o, i) = (w.shape()[0], w.shape()[1]);
                if self.rg(*weight) {
                    let mut gw = Tensor::zeros(w.shape());
                    crate::tensor::gemm(o, 1, i, g.data(), false, x.data(), false, 0.0, gw.data_mut());
                    self.accumulate(grads, *weight, gw);
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; i];
                    crate::tensor::gemm(i, o, 1, w.data(), true, g.data(), false, 0.0, &mut gx);
                    self.accumulate(grads, *input, Tensor::vector(gx));
                }
                self.accumulate(grads, *bias, g.clone());
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, &o)| if o > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::Sigmoid(x) => {
                let data = g.data().iter().zip(out.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), d).unwrap());
                }
            }
            Op::Scale(x, f) => {
                let d = g.data().iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d).unwrap());
            }
            Op::ChannelAffine { input, scale } => {
                let (_, h, w) = g.chw();
                let mut gx = g.clone();
                for (ci, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= scale[ci]);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::MaxRgb { input, argmax } => {
                let mut gx = Tensor::zeros(self.value(*input).shape());
                let n = argmax.len();
                for (p, &ch) in argmax.iter().enumerate() {
                    gx.data_mut()[ch as usize * n + p] += g.data()[p];
                }
                self.accumulate(grads, *input, gx);
            }
            Op::AdaptiveMaxPool { input, argmax } => {
                let mut gx = Tensor::zeros(self.value(*input).shape());
                for (gv, &src) in g.data().iter().zip(argmax) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *input, gx);
            }
            Op::SpatialMean(x) => {
                let t = self.value(*x);
                let (_, h, w) = t.chw();
                let n = (h * w) as f64;
                let mut gx = Tensor::zeros(t.shape());
                for (plane, gv) in gx.data_mut().chunks_mut(h * w).zip(g.data()) {
                    plane.fill(gv / n);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SpatialStd { input, mean } => {
                let t = self.value(*input);
                let (_, h, w) = t.chw();
                let n = (h * w) as f64;
                let mut gx = Tensor::zeros(t.shape());
                for (ci, (dst, src)) in gx.data_mut().chunks_mut(h * w).zip(t.data().chunks(h * w)).enumerate() {
                    let coef = g.data()[ci] / (n * out.data()[ci]);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = coef * (s - mean[ci]);
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len: usize = shape.iter().product();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(grads, p, Tensor::from_vec(&shape, slice).unwrap());
                }
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let v = g.item() / t.len() as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::NormInNorm { preds, targets } => {
                let p = self.value(*preds);
                let gp = norm_in_norm_grad(p.data(), targets);
                let d = gp.into_iter().map(|v| v * g.item()).collect();
                self.accumulate(grads, *preds, Tensor::from_vec(p.shape(), d).unwrap());
            }
            Op::Ssim {
                input,
                reference,
                config,
            } => {
                let t = self.value(*input);
                let (_, h, w) = t.chw();
                let (_, grad) = ssim_planar(t.data(), reference.data(), h, w, config, true)
                    .expect("validated in forward");
                let d = grad.unwrap().into_iter().map(|v| v * g.item()).collect();
                self.accumulate(grads, *input, Tensor::from_vec(t.shape(), d).unwrap());
            }
            Op::AbsDiff { input, target } => {
                let v = self.value(*input).item();
                let sign = if target - v > 0.0 {
                    -1.0
                } else if target - v < 0.0 {
                    1.0
                } else {
                    0.0
                };
                self.accumulate(grads, *input, Tensor::scalar(sign * g.item()));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every bound parameter, zero-filled where none flowed.
    pub fn for_bound(&self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        bound
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bin `[start, end)` of output cell `i` when pooling `size` cells into `out`.
pub(crate) fn pool_bin(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

fn centered_unit(x: &[f64]) -> (Vec<f64>, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (c, norm)
}

pub(crate) fn norm_in_norm_value(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalized loss needs a batch of at least 2, got {}",
            preds.len()
        )));
    }
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let (cp, np) = centered_unit(preds);
    let (ct, nt) = centered_unit(targets);
    Ok(cp
        .iter()
        .zip(&ct)
        .map(|(p, t)| {
            let d = p / (np + EPS) - t / (nt + EPS);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

fn norm_in_norm_grad(preds: &[f64], targets: &[f64]) -> Vec<f64> {
    let b = preds.len() as f64;
    let (c, n) = centered_unit(preds);
    let (ct, nt) = centered_unit(targets);
    let d = n + EPS;
    let r: Vec<f64> = c.iter().zip(&ct).map(|(p, t)| p / d - t / (nt + EPS)).collect();
    let loss = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if loss == 0.0 {
        return vec![0.0; preds.len()];
    }
    let gu: Vec<f64> = r.iter().map(|v| v / loss).collect();
    let cg: f64 = c.iter().zip(&gu).map(|(a, b)| a * b).sum();
    let coef = if n > 0.0 { cg / (n * d * d) } else { 0.0 };
    let h: Vec<f64> = gu.iter().zip(&c).map(|(g, cv)| g / d - cv * coef).collect();
    let hm = h.iter().sum::<f64>() / b;
    h.into_iter().map(|v| v - hm).collect()
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Because each node
//! only refers to earlier nodes, replaying the tape backwards is a valid
//! topological order and visits each recorded operation once.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry, BCE_CLAMP, MAX_NORM_EPS};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    AvgPool2(Var),
    Resize(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulChannelBroadcast(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    MaxNormalize {
        input: Var,
        argmax: usize,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Scale(Var, f32),
    Bce {
        pred: Var,
        target: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_hash: u64,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exactly zero when `var` does not reach the output.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Digest of every data-dependent branch taken so far: relu masks,
    /// argmax positions, and BCE clamp activity. Two evaluations with equal
    /// digests lie on the same smooth piece of the computation.
    pub fn branch_hash(&self) -> u64 {
        self.branch_hash
    }

    fn mix(&mut self, v: u64) {
        self.branch_hash = (self.branch_hash ^ v).wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry { stride, padding };
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), geom)?;
        let rg = self.rg(&[input, weight, bias]);
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

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::AvgPool2(input), rg))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(input), out_h, out_w)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Resize(input), rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = kernels::relu(x);
        let mut h = 0u64;
        for (i, &v) in x.data().iter().enumerate() {
            if v > 0.0 {
                h = h.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            }
        }
        self.mix(h);
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = kernels::sigmoid(self.value(input));
        let rg = self.rg(&[input]);
        self.push(out, Op::Sigmoid(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::ew_add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::ew_mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every channel of `x` by the single-channel `mask`.
    pub fn mul_channel_broadcast(&mut self, x: Var, mask: Var) -> Result<Var> {
        let out = kernels::mul_channel_broadcast(self.value(x), self.value(mask))?;
        let rg = self.rg(&[x, mask]);
        Ok(self.push(out, Op::MulChannelBroadcast(x, mask), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).slice_channels(start, len)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::SliceChannels { input, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    pub fn max_normalize(&mut self, input: Var) -> Var {
        let (out, argmax) = kernels::max_normalize(self.value(input));
        let guarded = self.value(input).max() <= MAX_NORM_EPS;
        self.mix(((argmax as u64) << 1) | guarded as u64);
        let rg = self.rg(&[input]);
        self.push(out, Op::MaxNormalize { input, argmax }, rg)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    /// Mean binary cross-entropy. Only `pred` receives gradient; targets are
    /// treated as fixed labels.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = kernels::bce(self.value(pred), self.value(target))?;
        let mut h = 0u64;
        for (i, &p) in self.value(pred).data().iter().enumerate() {
            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                h = h.wrapping_add((i as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
            }
        }
        self.mix(h);
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), label)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, label },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `output` seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != [1] {
            return shape_err(format!("backward needs a scalar output, got {:?}", self.shape(output)));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse-mode sweep with an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return shape_err(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for v in grads.iter().flatten() {
            if !v.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*input), val(*weight), g, *geom);
                acc(*input, gx);
                acc(*weight, gw);
                acc(*bias, gb);
            }
            Op::AvgPool2(x) => acc(*x, kernels::avg_pool2_backward(val(*x).shape(), g)),
            Op::Resize(x) => acc(*x, kernels::bilinear_resize_backward(val(*x).shape(), g)),
            Op::Relu(x) => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                acc(*x, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, kernels::ew_mul(g, val(*b))?);
                acc(*b, kernels::ew_mul(g, val(*a))?);
            }
            Op::MulChannelBroadcast(x, m) => {
                acc(*x, kernels::mul_channel_broadcast(g, val(*m))?);
                let (c, h, w) = g.dims3()?;
                let (gd, xd) = (g.data(), val(*x).data());
                let mut gm = vec![0f32; h * w];
                for ch in 0..c {
                    let range = ch * h * w..(ch + 1) * h * w;
                    for ((o, gv), xv) in gm.iter_mut().zip(&gd[range.clone()]).zip(&xd[range]) {
                        *o += gv * xv;
                    }
                }
                acc(*m, Tensor::from_parts(vec![1, h, w], gm));
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let (gd, xd, wd) = (g.data(), x.data(), w.data());
                if self.nodes[input.0].requires_grad {
                    let mut gx = vec![0f32; n];
                    for r in 0..m {
                        for (o, wv) in gx.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                            *o += gd[r] * wv;
                        }
                    }
                    acc(*input, Tensor::from_parts(vec![n], gx));
                }
                if self.nodes[weight.0].requires_grad {
                    let mut gw = vec![0f32; m * n];
                    for r in 0..m {
                        for (o, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xd) {
                            *o = gd[r] * xv;
                        }
                    }
                    acc(*weight, Tensor::from_parts(vec![m, n], gw));
                }
                acc(*bias, g.clone());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (gd, ad, bd) = (g.data(), av.data(), bv.data());
                let mut ga = vec![0f32; m * k];
                let mut gb = vec![0f32; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0f32;
                        for j in 0..n {
                            s += gd[i * n + j] * bd[p * n + j];
                            gb[p * n + j] += ad[i * k + p] * gd[i * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                acc(*a, Tensor::from_parts(vec![m, k], ga));
                acc(*b, Tensor::from_parts(vec![k, n], gb));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).shape()[0];
                    acc(p, g.slice_channels(start, c)?);
                    start += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let xv = val(*input);
                let (_, h, w) = xv.dims3()?;
                let mut gx = vec![0f32; xv.numel()];
                gx[start * h * w..start * h * w + g.numel()].copy_from_slice(g.data());
                acc(*input, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?),
            Op::MaxNormalize { input, argmax } => {
                let xv = val(*input);
                let max = xv.data()[*argmax];
                if max <= MAX_NORM_EPS {
                    acc(*input, g.map(|v| v / MAX_NORM_EPS));
                } else {
                    let mut gx: Vec<f32> = g.data().iter().map(|v| v / max).collect();
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                    gx[*argmax] -= (dot / (max as f64 * max as f64)) as f32;
                    acc(*input, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let (c, h, w) = xv.dims3()?;
                let inv = 1.0 / (h * w) as f32;
                let gd = g.data();
                acc(*x, Tensor::from_fn(&[c, h, w], |i| gd[i / (h * w)] * inv));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::Bce { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = g.data()[0] / p.numel() as f32;
                let data = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            scale * (pv - tv) / (pv * (1.0 - pv))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*pred, Tensor::from_parts(p.shape().to_vec(), data));
                let dt = p
                    .data()
                    .iter()
                    .map(|&pv| {
                        let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        scale * ((1.0 - pc).ln() - pc.ln())
                    })
                    .collect();
                acc(*target, Tensor::from_parts(p.shape().to_vec(), dt));
            }
            Op::SoftmaxCrossEntropy { logits, probs, label } => {
                let gv = g.data()[0];
                let mut d: Vec<f32> = probs.data().iter().map(|p| p * gv).collect();
                d[*label] -= gv;
                acc(*logits, Tensor::from_parts(probs.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

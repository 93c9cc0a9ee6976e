//! Forward and backward kernels on plain tensors.
//!
//! Every function here is deterministic: loops run in a fixed order, and no
//! kernel reads uninitialized or thread-shared state. The autodiff graph in
//! [`crate::graph`] composes these.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Guard used by [`max_normalize`] so an all-zero map stays all zero.
pub const MAX_NORM_EPS: f32 = 1e-8;

/// Boundary clamp applied to predictions inside [`bce`].
pub const BCE_CLAMP: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

fn conv_out_dim(input: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    let padded = input + 2 * g.padding;
    if g.stride == 0 || padded < k || !(padded - k).is_multiple_of(g.stride) {
        return shape_err(format!(
            "conv of size {input} with kernel {k}, stride {}, padding {} is not exact",
            g.stride, g.padding
        ));
    }
    Ok((padded - k) / g.stride + 1)
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `0..w`.
fn valid_range(w: usize, out: usize, k_off: usize, g: ConvGeometry) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if p > k_off { (p - k_off).div_ceil(s).min(out) } else { 0 };
    let hi = if w + p > k_off {
        ((w - 1 + p - k_off) / s + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_output_shape(input: &[usize], weight: &[usize], g: ConvGeometry) -> Result<(usize, usize, usize)> {
    let (cin, h, w) = match input {
        &[c, h, w] => (c, h, w),
        _ => return shape_err(format!("conv2d input must be C x H x W, got {input:?}")),
    };
    let (cout, wcin, kh, kw) = match weight {
        &[a, b, c, d] => (a, b, c, d),
        _ => return shape_err(format!("conv2d weight must be 4-d, got {weight:?}")),
    };
    if wcin != cin {
        return shape_err(format!("conv2d input has {cin} channels but weight expects {wcin}"));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("conv2d kernel must be square and odd, got {kh}x{kw}"));
    }
    Ok((cout, conv_out_dim(h, kh, g)?, conv_out_dim(w, kw, g)?))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (cout, oh, ow) = conv2d_output_shape(input.shape(), weight.shape(), g)?;
    if bias.shape() != [cout] {
        return shape_err(format!("conv2d bias must be [{cout}], got {:?}", bias.shape()));
    }
    let (cin, h, w) = input.dims3()?;
    let k = weight.shape()[2];
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0f32; cout * oh * ow];
    for co in 0..cout {
        let obase = co * oh * ow;
        out[obase..obase + oh * ow].fill(b[co]);
        for ci in 0..cin {
            let ibase = ci * h * w;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, ky, g);
                for kx in 0..k {
                    let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, ow, kx, g);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                        let irow = &x[ibase + iy * w..ibase + (iy + 1) * w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, oh, ow], out))
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![0f32; x.len()];
    let mut gw = vec![0f32; wt.len()];
    let mut gb = vec![0f32; cout];
    for (co, gbc) in gb.iter_mut().enumerate() {
        let obase = co * oh * ow;
        *gbc = go[obase..obase + oh * ow].iter().map(|&v| v as f64).sum::<f64>() as f32;
        for ci in 0..cin {
            let ibase = ci * h * w;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, ky, g);
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = valid_range(w, ow, kx, g);
                    if ox0 == ox1 {
                        continue;
                    }
                    let mut acc = 0f32;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &go[obase + oy * ow..obase + (oy + 1) * ow];
                        let irow = ibase + iy * w;
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            let n = ox1 - ox0;
                            let xs = &x[irow + ix0..irow + ix0 + n];
                            let gxs = &mut gx[irow + ix0..irow + ix0 + n];
                            for ((gi, xi), gv) in gxs.iter_mut().zip(xs).zip(&grow[ox0..ox1]) {
                                acc += gv * xi;
                                *gi += wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate().take(ox1).skip(ox0) {
                                let ix = irow + ox * g.stride + kx - g.padding;
                                acc += gv * x[ix];
                                gx[ix] += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (ch * h + 2 * oy) * w + 2 * ox;
                out[(ch * oh + oy) * ow + ox] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let go = grad_out.data();
    let mut gx = vec![0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * go[(ch * oh + oy) * ow + ox];
                let i = (ch * h + 2 * oy) * w + 2 * ox;
                gx[i] += g;
                gx[i + 1] += g;
                gx[i + w] += g;
                gx[i + w + 1] += g;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// One axis of a bilinear sampling plan: output index `i` reads `lo[i]` and
/// `hi[i]` with weights `1 - frac[i]` and `frac[i]`.
#[derive(Clone, Debug)]
pub struct AxisPlan {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

/// Half-pixel (align-corners-false) sampling: source coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub fn axis_plan(input: usize, output: usize) -> AxisPlan {
    let scale = input as f64 / output as f64;
    let mut plan = AxisPlan {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        plan.lo.push(lo);
        plan.hi.push(hi);
        plan.frac.push((src - lo as f64) as f32);
    }
    plan
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return shape_err(format!("resize target must be positive, got {out_h}x{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let (py, px) = (axis_plan(h, out_h), axis_plan(w, out_w));
    let x = input.data();
    let mut out = vec![0f32; c * out_h * out_w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            let (r0, r1, fy) = (base + py.lo[oy] * w, base + py.hi[oy] * w, py.frac[oy]);
            let orow = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (ox, o) in orow.iter_mut().enumerate() {
                let (c0, c1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                let top = x[r0 + c0] * (1.0 - fx) + x[r0 + c1] * fx;
                let bot = x[r1 + c0] * (1.0 - fx) + x[r1 + c1] * fx;
                *o = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Transpose of the bilinear sampling matrix applied to `grad_out`.
pub fn bilinear_resize_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (out_h, out_w) = (grad_out.shape()[1], grad_out.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let (py, px) = (axis_plan(h, out_h), axis_plan(w, out_w));
    let go = grad_out.data();
    let mut gx = vec![0f32; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            let (r0, r1, fy) = (base + py.lo[oy] * w, base + py.hi[oy] * w, py.frac[oy]);
            for ox in 0..out_w {
                let g = go[(ch * out_h + oy) * out_w + ox];
                let (c0, c1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                gx[r0 + c0] += g * (1.0 - fx) * (1.0 - fy);
                gx[r0 + c1] += g * fx * (1.0 - fy);
                gx[r1 + c0] += g * (1.0 - fx) * fy;
                gx[r1 + c1] += g * fx * fy;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "ew_add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "ew_mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `x[c, y, x] * mask[0, y, x]` for every channel `c`.
pub fn mul_channel_broadcast(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if mask.shape() != [1, h, w] {
        return shape_err(format!("broadcast mask must be [1, {h}, {w}], got {:?}", mask.shape()));
    }
    let m = mask.data();
    let mut out = x.data().to_vec();
    for ch in 0..c {
        for (o, mv) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(m) {
            *o *= mv;
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// `weight . input + bias` for a single vector.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.numel();
    let (m, wn) = match weight.shape() {
        &[m, wn] => (m, wn),
        s => return shape_err(format!("linear weight must be 2-d, got {s:?}")),
    };
    if input.shape() != [n] || wn != n {
        return shape_err(format!(
            "linear: input {:?} does not match weight {:?}",
            input.shape(),
            weight.shape()
        ));
    }
    if bias.shape() != [m] {
        return shape_err(format!("linear bias must be [{m}], got {:?}", bias.shape()));
    }
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let out = (0..m).map(|r| b[r] + dot(&wt[r * n..(r + 1) * n], x)).collect();
    Ok(Tensor::from_parts(vec![m], out))
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, k2, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) => (m, k, k2, n),
        (sa, sb) => return shape_err(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}")),
    };
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} and {k2} differ"));
    }
    let (x, y) = (a.data(), b.data());
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = x[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return shape_err("concat_channels needs at least one part");
    };
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return shape_err(format!("concat_channels: spatial {ph}x{pw} does not match {h}x{w}"));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![channels, h, w], data))
}

/// `x / max(eps, max(x))`, plus the index of the maximum.
pub fn max_normalize(input: &Tensor) -> (Tensor, usize) {
    let (argmax, max) =
        input.data().iter().enumerate().fold(
            (0, f32::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        );
    let denom = max.max(MAX_NORM_EPS);
    (input.map(|v| v / denom), argmax)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let out = (0..c)
        .map(|ch| {
            let s: f64 = input.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum();
            (s / plane as f64) as f32
        })
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f32> {
    same_shape(pred, target, "bce")?;
    let n = pred.numel() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / n) as f32)
}

/// Softmax cross-entropy of a logit vector against a class index.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    let n = logits.numel();
    if logits.shape() != [n] || label >= n {
        return shape_err(format!(
            "softmax_cross_entropy: label {label} for logits {:?}",
            logits.shape()
        ));
    }
    let max = logits.max();
    let exps: Vec<f64> = logits.data().iter().map(|&v| ((v - max) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f32> = exps.iter().map(|e| (e / z) as f32).collect();
    let loss = -((exps[label] / z).ln()) as f32;
    Ok((loss, Tensor::from_parts(vec![n], probs)))
}

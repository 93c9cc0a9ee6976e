//! Brute-force reference implementations and fixture loading shared by the
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use wfss_core::episodic::miou;
use wfss_core::kernels::{self, ConvGeometry};
use wfss_core::{Graph, Tensor};

pub const CONV_TOL: f64 = 1e-5;
pub const POOL_TOL: f64 = 0.0;
pub const RESIZE_TOL: f64 = 1e-6;
pub const BCE_TOL: f64 = 1e-6;
pub const MIOU_TOL: f64 = 1e-12;
/// Float32 kernels against float64 PyTorch references.
pub const TORCH_VALUE_TOL: f64 = 1e-5;
pub const TORCH_GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

pub fn max_abs(a: &[f64], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).abs()).fold(0.0, f64::max)
}

/// Six nested loops over (out channel, out row, out col, in channel, ky, kx).
pub fn conv2d_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0f64; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o] as f64;
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(i * h + y as usize) * wd + xx as usize] as f64;
                            let wv = w.data()[((o * cin + i) * k + ky) * k + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn avg_pool2_ref(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(c * h * w / 4);
    for ch in 0..c {
        for by in 0..h / 2 {
            for bx in 0..w / 2 {
                let mut s = 0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x.data()[(ch * h + 2 * by + dy) * w + 2 * bx + dx] as f64;
                    }
                }
                out.push(s / 4.0);
            }
        }
    }
    out
}

/// Source coordinate `(i + 0.5) * in / out - 0.5`, clamped, then the two
/// nearest samples blended per axis.
pub fn bilinear_ref(x: &Tensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
            .max(0.0)
            .min((n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let at = |ch: usize, y: usize, xx: usize| x.data()[(ch * h + y) * w + xx] as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x1))
                    + fy * ((1.0 - fx) * at(ch, y1, x0) + fx * at(ch, y1, x1));
                out.push(v);
            }
        }
    }
    out
}

pub fn bce_ref(p: &Tensor, t: &Tensor) -> f64 {
    let n = p.numel() as f64;
    p.data()
        .iter()
        .zip(t.data())
        .map(|(&p, &t)| {
            let (p, t) = (p as f64, t as f64);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Per-class IoU from a pixel-by-pixel tally of intersections and unions.
pub fn miou_ref(preds: &[Tensor], gts: &[Tensor], class_ids: &[usize]) -> (HashMap<usize, f64>, f64) {
    let mut inter: HashMap<usize, u64> = HashMap::new();
    let mut union: HashMap<usize, u64> = HashMap::new();
    for ((p, g), &c) in preds.iter().zip(gts).zip(class_ids) {
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            *inter.entry(c).or_default() += (a && b) as u64;
            *union.entry(c).or_default() += (a || b) as u64;
        }
    }
    let per: HashMap<usize, f64> = union
        .iter()
        .map(|(&c, &u)| (c, if u == 0 { 1.0 } else { inter[&c] as f64 / u as f64 }))
        .collect();
    let mean = per.values().sum::<f64>() / per.len() as f64;
    (per, mean)
}

pub fn random_binary(shape: &[usize], density: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
}

/// Random `(preds, gts, class_ids)` with a few classes and some empty masks.
pub fn random_miou_case(rng: &mut impl Rng) -> (Vec<Tensor>, Vec<Tensor>, Vec<usize>) {
    let n = rng.gen_range(1..8);
    let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..n {
        let dp = if rng.gen_bool(0.15) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let dg = if rng.gen_bool(0.15) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        preds.push(random_binary(&[1, h, w], dp, rng));
        gts.push(random_binary(&[1, h, w], dg, rng));
        ids.push(rng.gen_range(0..4));
    }
    (preds, gts, ids)
}

/// Outcome of one op's oracle comparison.
#[derive(Debug)]
pub struct OracleResult {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl OracleResult {
    fn new(op: &'static str, tolerance: f64) -> Self {
        Self {
            op,
            instances: 0,
            worst: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, err: f64) {
        self.instances += 1;
        self.worst = self.worst.max(err);
        if err.is_nan() || err > self.tolerance {
            self.failures.push(format!("{}: error {err:.3e}", label()));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn random_conv(rng: &mut impl Rng, n: usize) -> OracleResult {
    let mut res = OracleResult::new("conv2d", CONV_TOL);
    for i in 0..n {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2));
        let (oh, ow) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let h = (oh - 1) * stride + k - 2 * pad;
        let w = (ow - 1) * stride + k - 2 * pad;
        let x = rand_tensor(&[cin, h, w], -1.0, 1.0, rng);
        let wt = rand_tensor(&[cout, cin, k, k], -1.0, 1.0, rng);
        let b = rand_tensor(&[cout], -1.0, 1.0, rng);
        let got = kernels::conv2d(&x, &wt, &b, ConvGeometry { stride, padding: pad }).expect("exact geometry");
        res.record(
            || format!("random #{i}"),
            max_abs(&conv2d_ref(&x, &wt, &b, stride, pad), got.data()),
        );
    }
    res
}

pub fn random_pool(rng: &mut impl Rng, n: usize) -> OracleResult {
    let mut res = OracleResult::new("avg_pool2", POOL_TOL);
    for i in 0..n {
        let shape = [rng.gen_range(1..4), 2 * rng.gen_range(1..6), 2 * rng.gen_range(1..6)];
        let x = rand_tensor(&shape, -1.0, 1.0, rng);
        let got = kernels::avg_pool2(&x).expect("even input");
        res.record(|| format!("random #{i}"), max_abs(&avg_pool2_ref(&x), got.data()));
    }
    res
}

pub fn random_resize(rng: &mut impl Rng, n: usize) -> OracleResult {
    let mut res = OracleResult::new("bilinear_resize", RESIZE_TOL);
    for i in 0..n {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..10), rng.gen_range(1..10)];
        let (oh, ow) = (rng.gen_range(1..14), rng.gen_range(1..14));
        let x = rand_tensor(&shape, -1.0, 1.0, rng);
        let got = kernels::bilinear_resize(&x, oh, ow).expect("valid target");
        res.record(
            || format!("random #{i}"),
            max_abs(&bilinear_ref(&x, oh, ow), got.data()),
        );
    }
    res
}

pub fn random_bce(rng: &mut impl Rng, n: usize) -> OracleResult {
    let mut res = OracleResult::new("bce", BCE_TOL);
    for i in 0..n {
        let shape = [1, rng.gen_range(1..6), rng.gen_range(1..6)];
        let p = rand_tensor(&shape, 0.01, 0.99, rng);
        let t = rand_tensor(&shape, 0.0, 1.0, rng);
        let want = bce_ref(&p, &t);
        let got = kernels::bce(&p, &t).expect("same shapes") as f64;
        res.record(|| format!("random #{i}"), (got - want).abs());
    }
    res
}

pub fn random_miou(rng: &mut impl Rng, n: usize) -> OracleResult {
    let mut res = OracleResult::new("miou", MIOU_TOL);
    for i in 0..n {
        let (preds, gts, ids) = random_miou_case(rng);
        let (per, mean) = miou_ref(&preds, &gts, &ids);
        let got = miou(&preds, &gts, &ids).expect("valid case");
        let mut err = (got.mean - mean).abs();
        if got.per_class.len() != per.len() {
            err = f64::INFINITY;
        }
        for (c, v) in &got.per_class {
            err = err.max(per.get(c).map_or(f64::INFINITY, |w| (v - w).abs()));
        }
        res.record(|| format!("random #{i}"), err);
    }
    res
}

fn unpack(v: &Value) -> Tensor {
    let shape: Vec<usize> = v["shape"]
        .as_array()
        .expect("shape")
        .iter()
        .map(|d| d.as_u64().expect("dim") as usize)
        .collect();
    let data: Vec<f32> = v["data"]
        .as_array()
        .expect("data")
        .iter()
        .map(|d| d.as_f64().expect("number") as f32)
        .collect();
    let shape = if shape.is_empty() { vec![1] } else { shape };
    tensor(&shape, data)
}

fn unpack_f64(v: &Value) -> Vec<f64> {
    if let Some(x) = v.as_f64() {
        return vec![x];
    }
    v["data"]
        .as_array()
        .expect("data")
        .iter()
        .map(|d| d.as_f64().expect("number"))
        .collect()
}

pub fn fixtures() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/oracles.json");
    let text = std::fs::read_to_string(path).expect("oracle fixtures present");
    serde_json::from_str(&text).expect("valid fixture json")
}

/// Runs `build` on fresh graph parameters for `inputs`, seeds the tape with
/// `r`, and returns the output with every input gradient.
fn tape<F>(inputs: &[Tensor], r: Option<&Tensor>, build: F) -> (Tensor, Vec<Tensor>)
where
    F: FnOnce(&mut Graph, &[wfss_core::Var]) -> wfss_core::Var,
{
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let value = g.value(out).clone();
    let grads = match r {
        Some(r) => g.backward_with(out, r.clone()),
        None => g.backward(out),
    }
    .expect("backward");
    (value, vars.iter().map(|&v| grads.get(v)).collect())
}

fn torch_case(res: &mut OracleResult, label: String, out: &Tensor, want: &Value, grads: &[Tensor], want_grads: &Value) {
    let mut err = max_abs(&unpack_f64(want), out.data()) / TORCH_VALUE_TOL;
    for (g, w) in grads.iter().zip(want_grads.as_array().expect("grads")) {
        err = err.max(max_abs(&unpack_f64(w), g.data()) / TORCH_GRAD_TOL);
    }
    res.record(|| label, err);
}

/// Compares values and tape gradients against the stored PyTorch results.
/// Errors are reported as multiples of the tolerance, so the bound is 1.
pub fn torch_fixtures() -> Vec<OracleResult> {
    let fx = fixtures();
    let mut out = Vec::new();
    let cases = |name: &str| fx[name].as_array().expect("case list").clone();

    let mut res = OracleResult::new("conv2d", 1.0);
    for (i, c) in cases("conv2d").iter().enumerate() {
        let ins: Vec<Tensor> = c["inputs"].as_array().unwrap().iter().map(unpack).collect();
        let (s, p) = (
            c["stride"].as_u64().unwrap() as usize,
            c["padding"].as_u64().unwrap() as usize,
        );
        let r = unpack(&c["r"]);
        let (val, grads) = tape(&ins, Some(&r), |g, v| g.conv2d(v[0], v[1], v[2], s, p).expect("conv"));
        torch_case(
            &mut res,
            format!("torch conv2d #{i}"),
            &val,
            &c["output"],
            &grads,
            &c["grads"],
        );
    }
    out.push(res);

    let mut res = OracleResult::new("avg_pool2", 1.0);
    for (i, c) in cases("avg_pool2").iter().enumerate() {
        let ins: Vec<Tensor> = c["inputs"].as_array().unwrap().iter().map(unpack).collect();
        let r = unpack(&c["r"]);
        let (val, grads) = tape(&ins, Some(&r), |g, v| g.avg_pool2(v[0]).expect("pool"));
        torch_case(
            &mut res,
            format!("torch avg_pool2 #{i}"),
            &val,
            &c["output"],
            &grads,
            &c["grads"],
        );
    }
    out.push(res);

    let mut res = OracleResult::new("bilinear_resize", 1.0);
    for (i, c) in cases("bilinear_resize").iter().enumerate() {
        let ins: Vec<Tensor> = c["inputs"].as_array().unwrap().iter().map(unpack).collect();
        let (oh, ow) = (
            c["out_h"].as_u64().unwrap() as usize,
            c["out_w"].as_u64().unwrap() as usize,
        );
        let r = unpack(&c["r"]);
        let (val, grads) = tape(&ins, Some(&r), |g, v| g.bilinear_resize(v[0], oh, ow).expect("resize"));
        torch_case(
            &mut res,
            format!("torch bilinear_resize #{i}"),
            &val,
            &c["output"],
            &grads,
            &c["grads"],
        );
    }
    out.push(res);

    let mut res = OracleResult::new("bce", 1.0);
    for (i, c) in cases("bce").iter().enumerate() {
        let ins: Vec<Tensor> = c["inputs"].as_array().unwrap().iter().map(unpack).collect();
        let (val, grads) = tape(&ins, None, |g, v| g.bce(v[0], v[1]).expect("bce"));
        torch_case(
            &mut res,
            format!("torch bce #{i}"),
            &val,
            &c["output"],
            &grads,
            &c["grads"],
        );
    }
    out.push(res);

    let mut res = OracleResult::new("softmax_cross_entropy", 1.0);
    for (i, c) in cases("softmax_cross_entropy").iter().enumerate() {
        let ins: Vec<Tensor> = c["inputs"].as_array().unwrap().iter().map(unpack).collect();
        let label = c["label"].as_u64().unwrap() as usize;
        let (val, grads) = tape(&ins, None, |g, v| g.softmax_cross_entropy(v[0], label).expect("ce"));
        torch_case(
            &mut res,
            format!("torch softmax_cross_entropy #{i}"),
            &val,
            &c["output"],
            &grads,
            &c["grads"],
        );
    }
    out.push(res);

    let mut res = OracleResult::new("miou", MIOU_TOL);
    for (i, c) in cases("miou").iter().enumerate() {
        let preds: Vec<Tensor> = c["preds"].as_array().unwrap().iter().map(unpack).collect();
        let gts: Vec<Tensor> = c["gts"].as_array().unwrap().iter().map(unpack).collect();
        let ids: Vec<usize> = c["class_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let got = miou(&preds, &gts, &ids).expect("miou");
        let mut err = (got.mean - c["mean"].as_f64().unwrap()).abs();
        for (k, v) in c["per_class"].as_object().unwrap() {
            let class: usize = k.parse().unwrap();
            let mine = got.per_class.get(&class).copied().unwrap_or(f64::INFINITY);
            err = err.max((mine - v.as_f64().unwrap()).abs());
        }
        res.record(|| format!("torch miou #{i}"), err);
    }
    out.push(res);
    out
}

/// Random brute-force comparisons for the five oracle-checked ops.
pub fn brute_force(seed: u64, per_op: usize) -> Vec<OracleResult> {
    let mut r = rng(seed);
    vec![
        random_conv(&mut r, per_op),
        random_pool(&mut r, per_op),
        random_resize(&mut r, per_op),
        random_bce(&mut r, per_op),
        random_miou(&mut r, per_op),
    ]
}

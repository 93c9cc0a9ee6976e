//! Finite-difference checks of every differentiable op and of the end-to-end
//! episode loss, on small random instances drawn from one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfm::{fam_realign, ncd, octave_conv, octave_split, CfmConfig, FrequencyPair, NcdParams, OctaveWeights};
use crate::csm::{csm_fuse, gen_pseudo_embeddings, text_to_grid, AdapterConfig, AdapterParams};
use crate::episodic::total_loss;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::Var;
use crate::model::{forward_episode, prototype_prior, EncoderParams, ModelConfig, ModelParams, Variant};
use crate::params::{ConvParams, ParamTree};
use crate::pseudo_mask::{seg_head, HeadConfig, HeadParams};
use crate::tensor::Tensor;

/// One named check.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Rebuilds a parameter container whose leaves are `vars`, in leaf order.
fn rebind<P: ParamTree<Tensor>>(template: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut it = vars.iter();
    template.map_leaves("", &mut |_, _| *it.next().expect("one var per leaf"))
}

fn leaf_values<P: ParamTree<Tensor>>(p: &P) -> Vec<Tensor> {
    p.leaves("").into_iter().map(|(_, t)| t).collect()
}

/// Uniform draw whose spread keeps activations near unit scale: weights
/// use `sqrt(3 / fan_in)`, vectors use `[-1, 1]`.
fn unit_scale_draw(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = if shape.len() > 1 {
        (3.0 / fan_in as f32).sqrt()
    } else {
        1.0
    };
    rand_tensor(shape, -bound, bound, rng)
}

/// Binary mask with one random axis-aligned box of foreground.
fn box_mask(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (y0, x0) = (rng.gen_range(0..side / 2), rng.gen_range(0..side / 2));
    let (y1, x1) = (rng.gen_range(y0 + 2..=side), rng.gen_range(x0 + 2..=side));
    Tensor::from_fn(&[1, side, side], |i| {
        let (y, x) = (i / side, i % side);
        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

/// Small model used by the end-to-end check.
pub fn small_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        cfm: CfmConfig {
            backbone_channels: [2, 2, 4],
            channels: 2,
            out_channels: 2,
            ..CfmConfig::default()
        },
        adapter: AdapterConfig {
            size: 5,
            ..AdapterConfig::default()
        },
        head: HeadConfig {
            hidden: 3,
            iterations: 2,
        },
        embed_dim: 8,
    }
}

/// Tape gradient of the full episode loss against central differences, for
/// every trainable parameter of `variant` on 16x16 images. All parameters are
/// packed into one vector so the error is measured against the largest
/// gradient entry of the whole model.
pub fn end_to_end(variant: Variant, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_model_config(variant);
    let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
    let table = gen_pseudo_embeddings(&names, cfg.embed_dim, seed)?;
    let encoder = EncoderParams::init(&cfg, &mut rng);
    let params =
        ModelParams::init(&cfg, &mut rng).map_leaves("", &mut |_, t: &Tensor| unit_scale_draw(t.shape(), &mut rng));
    let support = encoder.taps(&rand_tensor(&[3, 16, 16], 0.0, 1.0, &mut rng))?;
    let query = encoder.taps(&rand_tensor(&[3, 16, 16], 0.0, 1.0, &mut rng))?;
    let target_s = box_mask(16, &mut rng);
    let target_q = box_mask(16, &mut rng);
    let class_id = rng.gen_range(0..names.len());
    let leaves = leaf_values(&params);
    let flat: Vec<f32> = leaves.iter().flat_map(|t| t.data().iter().copied()).collect();
    let total = flat.len();
    grad_check(
        |g, vars| {
            let column = g.reshape(vars[0], &[total, 1, 1])?;
            let mut offset = 0;
            let mut parts = Vec::with_capacity(leaves.len());
            for leaf in &leaves {
                let piece = g.slice_channels(column, offset, leaf.numel())?;
                parts.push(g.reshape(piece, leaf.shape())?);
                offset += leaf.numel();
            }
            let p = rebind(&params, &parts);
            let out = forward_episode(g, &p, &cfg, &table, class_id, &[&support], &query)?;
            let ts = g.constant(target_s.clone());
            let tq = g.constant(target_q.clone());
            total_loss(g, &out.support_masks, &out.query_masks, &[ts], tq, 1.0, 1.0)
        },
        &[Tensor::from_parts(vec![total], flat)],
        &GradCheckOptions {
            seed,
            skip_kinks: false,
            ..opts.clone()
        },
    )
}

type CaseFn = fn(&mut ChaCha8Rng, &GradCheckOptions) -> Result<GradCheckReport>;

fn op_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", |rng, o| {
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let x = rand_tensor(&[2, 5, 7], -1.0, 1.0, rng);
            let w = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[3], -1.0, 1.0, rng);
            grad_check(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad), &[x, w, b], o)
        }),
        ("avg_pool2", |rng, o| {
            let x = rand_tensor(&[2, 4, 6], -1.0, 1.0, rng);
            grad_check(|g, v| g.avg_pool2(v[0]), &[x], o)
        }),
        ("bilinear_resize", |rng, o| {
            let (oh, ow) = (rng.gen_range(2..9), rng.gen_range(2..9));
            let x = rand_tensor(&[2, 4, 5], -1.0, 1.0, rng);
            grad_check(move |g, v| g.bilinear_resize(v[0], oh, ow), &[x], o)
        }),
        ("relu", |rng, o| {
            let x = rand_tensor(&[2, 3, 3], -1.0, 1.0, rng);
            grad_check(|g, v| Ok(g.relu(v[0])), &[x], o)
        }),
        ("sigmoid", |rng, o| {
            let x = rand_tensor(&[2, 3, 3], -3.0, 3.0, rng);
            grad_check(|g, v| Ok(g.sigmoid(v[0])), &[x], o)
        }),
        ("add", |rng, o| {
            let a = rand_tensor(&[2, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 3], -1.0, 1.0, rng);
            grad_check(|g, v| g.add(v[0], v[1]), &[a, b], o)
        }),
        ("mul", |rng, o| {
            let a = rand_tensor(&[2, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 3], -1.0, 1.0, rng);
            grad_check(|g, v| g.mul(v[0], v[1]), &[a, b], o)
        }),
        ("mul_channel_broadcast", |rng, o| {
            let x = rand_tensor(&[3, 4, 4], -1.0, 1.0, rng);
            let m = rand_tensor(&[1, 4, 4], -1.0, 1.0, rng);
            grad_check(|g, v| g.mul_channel_broadcast(v[0], v[1]), &[x, m], o)
        }),
        ("linear", |rng, o| {
            let x = rand_tensor(&[5], -1.0, 1.0, rng);
            let w = rand_tensor(&[3, 5], -1.0, 1.0, rng);
            let b = rand_tensor(&[3], -1.0, 1.0, rng);
            grad_check(|g, v| g.linear(v[0], v[1], v[2]), &[x, w, b], o)
        }),
        ("matmul", |rng, o| {
            let a = rand_tensor(&[3, 4], -1.0, 1.0, rng);
            let b = rand_tensor(&[4, 2], -1.0, 1.0, rng);
            grad_check(|g, v| g.matmul(v[0], v[1]), &[a, b], o)
        }),
        ("concat_channels", |rng, o| {
            let a = rand_tensor(&[1, 3, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 3, 3], -1.0, 1.0, rng);
            grad_check(|g, v| g.concat_channels(&[v[0], v[1], v[0]]), &[a, b], o)
        }),
        ("slice_channels", |rng, o| {
            let x = rand_tensor(&[4, 3, 3], -1.0, 1.0, rng);
            grad_check(|g, v| g.slice_channels(v[0], 1, 2), &[x], o)
        }),
        ("reshape", |rng, o| {
            let x = rand_tensor(&[2, 3, 4], -1.0, 1.0, rng);
            grad_check(|g, v| g.reshape(v[0], &[6, 4]), &[x], o)
        }),
        ("max_normalize", |rng, o| {
            let x = rand_tensor(&[1, 4, 4], 0.0, 1.0, rng);
            grad_check(|g, v| Ok(g.max_normalize(v[0])), &[x], o)
        }),
        ("global_avg_pool", |rng, o| {
            let x = rand_tensor(&[3, 4, 5], -1.0, 1.0, rng);
            grad_check(|g, v| g.global_avg_pool(v[0]), &[x], o)
        }),
        ("sum", |rng, o| {
            let x = rand_tensor(&[3, 4], -1.0, 1.0, rng);
            grad_check(|g, v| Ok(g.sum(v[0])), &[x], o)
        }),
        ("scale", |rng, o| {
            let k = rng.gen_range(-2.0..2.0);
            let x = rand_tensor(&[3, 4], -1.0, 1.0, rng);
            grad_check(move |g, v| Ok(g.scale(v[0], k)), &[x], o)
        }),
        ("bce", |rng, o| {
            let p = rand_tensor(&[1, 4, 4], 0.05, 0.95, rng);
            let t = rand_tensor(&[1, 4, 4], 0.0, 1.0, rng);
            grad_check(|g, v| g.bce(v[0], v[1]), &[p, t], o)
        }),
        ("softmax_cross_entropy", |rng, o| {
            let label = rng.gen_range(0..5);
            let x = rand_tensor(&[5], -2.0, 2.0, rng);
            grad_check(move |g, v| g.softmax_cross_entropy(v[0], label), &[x], o)
        }),
        ("octave_split", |rng, o| {
            let x = rand_tensor(&[4, 4, 4], -1.0, 1.0, rng);
            grad_check(
                |g, v| {
                    let p = octave_split(g, v[0])?;
                    let low = g.bilinear_resize(p.low, 4, 4)?;
                    g.concat_channels(&[p.high, low])
                },
                &[x],
                o,
            )
        }),
        ("octave_conv", |rng, o| {
            let w = OctaveWeights::init(2, 3, 3, rng);
            let mut inputs = vec![
                rand_tensor(&[2, 4, 4], -1.0, 1.0, rng),
                rand_tensor(&[2, 2, 2], -1.0, 1.0, rng),
            ];
            inputs.extend(leaf_values(&w));
            grad_check(
                move |g, v| {
                    let out = octave_conv(g, FrequencyPair { high: v[0], low: v[1] }, &rebind(&w, &v[2..]))?;
                    let low = g.bilinear_resize(out.low, 4, 4)?;
                    g.concat_channels(&[out.high, low])
                },
                &inputs,
                o,
            )
        }),
        ("fam_realign", |rng, o| {
            let side = rng.gen_range(3..9);
            let h = rand_tensor(&[2, 4, 4], -1.0, 1.0, rng);
            let l = rand_tensor(&[2, 2, 2], -1.0, 1.0, rng);
            grad_check(
                move |g, v| fam_realign(g, FrequencyPair { high: v[0], low: v[1] }, side, side),
                &[h, l],
                o,
            )
        }),
        ("ncd", |rng, o| {
            let p = NcdParams {
                fuse: ConvParams::init(2, 6, 3, 1.0, rng),
            };
            let mut inputs = vec![
                rand_tensor(&[2, 6, 6], -1.0, 1.0, rng),
                rand_tensor(&[2, 3, 3], -1.0, 1.0, rng),
                rand_tensor(&[2, 2, 2], -1.0, 1.0, rng),
            ];
            inputs.extend(leaf_values(&p));
            grad_check(
                move |g, v| Ok(ncd(g, v[0], v[1], v[2], &rebind(&p, &v[3..]))?.out),
                &inputs,
                o,
            )
        }),
        ("text_to_grid", |rng, o| {
            let p = AdapterParams::init(3, 6, rng);
            let mut inputs = vec![rand_tensor(&[6], -1.0, 1.0, rng)];
            inputs.extend(leaf_values(&p));
            grad_check(move |g, v| text_to_grid(g, v[0], &rebind(&p, &v[1..])), &inputs, o)
        }),
        ("csm_fuse", |rng, o| {
            let f = rand_tensor(&[2, 8, 8], -1.0, 1.0, rng);
            let t = rand_tensor(&[1, 3, 3], -1.0, 1.0, rng);
            grad_check(|g, v| csm_fuse(g, v[0], v[1], 8), &[f, t], o)
        }),
        ("prototype_prior", |rng, o| {
            let fs = rand_tensor(&[3, 5, 5], -1.0, 1.0, rng);
            let ms = rand_tensor(&[1, 8, 8], 0.0, 1.0, rng);
            let fq = rand_tensor(&[3, 5, 5], -1.0, 1.0, rng);
            grad_check(|g, v| prototype_prior(g, &[(v[0], v[1])], v[2]), &[fs, ms, fq], o)
        }),
        ("seg_head", |rng, o| {
            let p = HeadParams::init(2, 3, rng).map_leaves("", &mut |_, t: &Tensor| unit_scale_draw(t.shape(), rng));
            let mut inputs = vec![
                rand_tensor(&[2, 5, 5], -1.0, 1.0, rng),
                rand_tensor(&[1, 5, 5], 0.0, 1.0, rng),
            ];
            inputs.extend(leaf_values(&p));
            grad_check(
                move |g, v| {
                    let masks = seg_head(g, v[0], v[1], &rebind(&p, &v[2..]), 2, 7, 7)?;
                    g.concat_channels(&masks)
                },
                &inputs,
                o,
            )
        }),
        ("total_loss", |rng, o| {
            let ins: Vec<Tensor> = (0..6).map(|_| rand_tensor(&[1, 3, 3], 0.05, 0.95, rng)).collect();
            let (alpha, beta) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
            grad_check(
                move |g, v| total_loss(g, &[vec![v[0], v[1]]], &[v[2], v[3]], &[v[4]], v[5], alpha, beta),
                &ins,
                o,
            )
        }),
    ]
}

/// Names of every case [`run`] produces, in order.
pub fn case_names() -> Vec<String> {
    let mut names: Vec<String> = op_cases().iter().map(|(n, _)| n.to_string()).collect();
    for v in Variant::ALL {
        names.push(format!("end_to_end[{}]", v.label()));
    }
    names
}

/// Runs every op case and the end-to-end check of every variant.
pub fn run(seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for (i, (name, case)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
        let report = case(&mut rng, &GradCheckOptions { seed, ..opts.clone() })?;
        out.push(SuiteCase {
            name: name.to_string(),
            report,
        });
    }
    for v in Variant::ALL {
        out.push(SuiteCase {
            name: format!("end_to_end[{}]", v.label()),
            report: end_to_end(v, seed, opts)?,
        });
    }
    Ok(out)
}

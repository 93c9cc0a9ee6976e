//! Model assembly: the frozen encoder, the feature variants, and query
//! prediction.
//!
//! The encoder (toy backbone plus a projection from text embeddings to
//! class weights) is pretrained by image-level classification on base
//! classes and then frozen. Its taps feed either the frequency-aware module
//! or a plain single-tap baseline, optionally followed by the text adapter,
//! and the refinement head turns features into masks.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{
    cfm_from_taps, dims3, toy_backbone, BackboneParams, BackboneTaps, CfmConfig, CfmParams, CANONICAL_GRID,
};
use crate::csm::{csm_forward, AdapterConfig, AdapterParams, ClassEmbeddingTable, DEFAULT_EMBED_DIM};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::optim::Sgd;
use crate::params::{bind, conv_same, join, uniform, with_values, ConvParams, ParamTree};
use crate::pseudo_mask::{binarize, cam, seg_head, uninformed_prior, HeadConfig, HeadParams};
use crate::tensor::Tensor;

/// Which optional modules are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub cfm: bool,
    pub csm: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant { cfm: false, csm: false };
    pub const CFM: Variant = Variant { cfm: true, csm: false };
    pub const CSM: Variant = Variant { cfm: false, csm: true };
    pub const FULL: Variant = Variant { cfm: true, csm: true };
    pub const ALL: [Variant; 4] = [Variant::BASELINE, Variant::CFM, Variant::CSM, Variant::FULL];

    pub fn label(self) -> &'static str {
        match (self.cfm, self.csm) {
            (false, false) => "baseline",
            (true, false) => "cfm",
            (false, true) => "csm",
            (true, true) => "cfm+csm",
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Variant::BASELINE),
            "cfm" => Ok(Variant::CFM),
            "csm" => Ok(Variant::CSM),
            "cfm+csm" | "full" => Ok(Variant::FULL),
            other => Err(Error::InvalidArgument(format!(
                "unknown module set {other:?}; expected baseline, cfm, csm or cfm+csm"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub cfm: CfmConfig,
    pub adapter: AdapterConfig,
    pub head: HeadConfig,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FULL,
            cfm: CfmConfig::default(),
            adapter: AdapterConfig::default(),
            head: HeadConfig::default(),
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cfm.realign[0] != CANONICAL_GRID || self.adapter.grid != CANONICAL_GRID {
            return Err(Error::InvalidArgument(format!(
                "features must live on the {CANONICAL_GRID}x{CANONICAL_GRID} grid"
            )));
        }
        if self.adapter.size == 0 || self.adapter.size > self.adapter.grid {
            return Err(Error::InvalidArgument(format!(
                "adapter size must be in 1..={}, got {}",
                self.adapter.grid, self.adapter.size
            )));
        }
        if self.head.iterations == 0 {
            return Err(Error::InvalidArgument("head needs at least one iteration".into()));
        }
        if !self.cfm.channels.is_multiple_of(2) || self.cfm.backbone_channels.iter().any(|c| !c.is_multiple_of(2)) {
            return Err(Error::InvalidArgument("octave channel counts must be even".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.cfm.out_channels
    }
}

/// Toy backbone plus the projection from text embeddings to class weights
/// over the last tap's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub backbone: BackboneParams<T>,
    /// `dim x C3`; a class's weight vector is `e_c . class_proj`.
    pub class_proj: T,
    /// `dim x 1`; a class's pretraining logit bias is `e_c . class_bias`.
    pub class_bias: T,
}

impl<T> ParamTree<T> for EncoderParams<T> {
    type Mapped<U> = EncoderParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<EncoderParams<U>, E> {
        Ok(EncoderParams {
            backbone: self.backbone.try_map_leaves(&join(prefix, "backbone"), f)?,
            class_proj: f(&join(prefix, "class_proj"), &self.class_proj)?,
            class_bias: f(&join(prefix, "class_bias"), &self.class_bias)?,
        })
    }
}

impl EncoderParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c3 = cfg.cfm.backbone_channels[2];
        Self {
            backbone: BackboneParams::init(cfg.cfm.backbone_channels, rng),
            class_proj: uniform(&[cfg.embed_dim, c3], (3.0 / c3 as f32).sqrt(), rng),
            class_bias: Tensor::zeros(&[cfg.embed_dim, 1]),
        }
    }

    /// CAM weight vectors over the last tap's channels for `classes`, each
    /// projected from its text embedding and centered on the mean over
    /// `classes`. The shared component cancels in the softmax and is never
    /// trained, so removing it keeps background activations out of the CAM.
    pub fn class_weights(&self, table: &ClassEmbeddingTable, classes: &[usize]) -> Result<Vec<Tensor>> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("class_weights needs at least one class".into()));
        }
        let w = kernels::matmul(&table.rows(classes)?, &self.class_proj)?;
        let c3 = self.class_proj.shape()[1];
        let mut mean = vec![0f32; c3];
        for row in w.data().chunks(c3) {
            mean.iter_mut()
                .zip(row)
                .for_each(|(m, &v)| *m += v / classes.len() as f32);
        }
        w.data()
            .chunks(c3)
            .map(|row| Tensor::new(vec![c3], row.iter().zip(&mean).map(|(&v, &m)| v - m).collect()))
            .collect()
    }

    /// Backbone taps of one image, computed without recording gradients.
    pub fn taps(&self, image: &Tensor) -> Result<BackboneTaps<Tensor>> {
        let mut g = Graph::new();
        let bp = bind(&mut g, &self.backbone, false);
        let x = g.constant(normalize_image(image));
        let taps = toy_backbone(&mut g, x, &bp)?;
        Ok(BackboneTaps {
            low_level: g.value(taps.low_level).clone(),
            mid_level: g.value(taps.mid_level).clone(),
            high_level: g.value(taps.high_level).clone(),
        })
    }
}

/// Centers `[0, 1]` pixel values around zero.
pub fn normalize_image(image: &Tensor) -> Tensor {
    image.map(|v| v - 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Images averaged per step.
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Weight of the mean positive activation map of classes absent from the
    /// image, which keeps class weights from firing on background.
    pub absent_weight: f32,
    /// Hinge margin on the mean positive activation map of the labeled
    /// class, so a class cannot be recognized only by the absence of others.
    pub present_margin: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 2e-2,
            momentum: 0.9,
            absent_weight: 1.0,
            present_margin: 1.0,
        }
    }
}

/// Image-level classification over `classes`; returns the trained encoder
/// and its per-step loss.
pub fn pretrain_encoder(
    dataset: &Dataset,
    classes: &[usize],
    table: &ClassEmbeddingTable,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderParams<Tensor>, Vec<f32>)> {
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two classes".into()));
    }
    if table.dim() != model.embed_dim {
        return Err(Error::InvalidArgument(format!(
            "embedding table has dim {}, model expects {}",
            table.dim(),
            model.embed_dim
        )));
    }
    let pool: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(label, &cid)| dataset.indices_of_class(cid).into_iter().map(move |i| (i, label)))
        .collect();
    if pool.is_empty() {
        return Err(Error::InsufficientData("no images for the pretraining classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x01);
    let mut enc = EncoderParams::init(model, &mut rng);
    let rows = table.rows(classes)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.max(1);
    let n = classes.len();
    for step in 0..cfg.steps {
        let mut acc: Vec<Tensor> = Vec::new();
        let mut total = 0f32;
        for _ in 0..batch {
            let &(idx, label) = pool.choose(&mut rng).expect("pool is nonempty");
            let mut g = Graph::new();
            let ev = bind(&mut g, &enc, true);
            let x = g.constant(normalize_image(&dataset.samples[idx].image));
            let taps = toy_backbone(&mut g, x, &ev.backbone)?;
            let pooled = g.global_avg_pool(taps.high_level)?;
            let e = g.constant(rows.clone());
            let w = g.matmul(e, ev.class_proj)?;
            let b = g.matmul(e, ev.class_bias)?;
            let b = g.reshape(b, &[n])?;
            let logits = g.linear(pooled, w, b)?;
            let mut loss = g.softmax_cross_entropy(logits, label)?;
            if cfg.absent_weight > 0.0 || cfg.present_margin > 0.0 {
                let (c3, h, wd) = dims3(&g, taps.high_level)?;
                let hw = h * wd;
                let flat = g.reshape(taps.high_level, &[c3, hw])?;
                let maps = g.matmul(w, flat)?;
                let maps = g.relu(maps);
                let k = cfg.absent_weight / ((n - 1) * hw) as f32;
                let absent = g.constant(Tensor::from_fn(&[n, hw], |i| if i / hw == label { 0.0 } else { k }));
                let weighted = g.mul(maps, absent)?;
                let penalty = g.sum(weighted);
                loss = g.add(loss, penalty)?;
                let present = g.constant(Tensor::from_fn(&[n, hw], |i| {
                    if i / hw == label {
                        1.0 / hw as f32
                    } else {
                        0.0
                    }
                }));
                let own = g.mul(maps, present)?;
                let own = g.sum(own);
                let own = g.scale(own, -1.0);
                let margin = g.constant(Tensor::scalar(cfg.present_margin));
                let shortfall = g.add(own, margin)?;
                let shortfall = g.relu(shortfall);
                loss = g.add(loss, shortfall)?;
            }
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            total += value;
            let grads = g.backward(loss)?;
            let gl = ev.leaves("").into_iter().map(|(_, v)| grads.get(v));
            if acc.is_empty() {
                acc = gl.collect();
            } else {
                for (a, g) in acc.iter_mut().zip(gl) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        let inv = 1.0 / batch as f32;
        acc.iter_mut()
            .for_each(|a| a.data_mut().iter_mut().for_each(|v| *v *= inv));
        losses.push(total * inv);
        let mut values: Vec<Tensor> = enc.leaves("").into_iter().map(|(_, t)| t).collect();
        opt.step(&mut values, &acc)?;
        enc = with_values(&enc, values)?;
    }
    Ok((enc, losses))
}

/// Frozen per-image inputs: backbone taps for every image, rescaled so each
/// channel has unit root mean square over the pseudo-labeled images, and CAM
/// pseudo-masks at image resolution for images of the given classes.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub taps: Vec<BackboneTaps<Tensor>>,
    pub pseudo: Vec<Option<Tensor>>,
    pub image_size: usize,
}

impl FeatureStore {
    pub fn build(
        dataset: &Dataset,
        encoder: &EncoderParams<Tensor>,
        table: &ClassEmbeddingTable,
        pseudo_classes: &[usize],
    ) -> Result<Self> {
        let mut weights = vec![None; table.len()];
        for (&c, w) in pseudo_classes.iter().zip(encoder.class_weights(table, pseudo_classes)?) {
            weights[c] = Some(w);
        }
        let image_size = dataset.samples.first().map(|s| s.image.shape()[1]).unwrap_or(0);
        let mut taps = Vec::with_capacity(dataset.samples.len());
        let mut pseudo = Vec::with_capacity(dataset.samples.len());
        for s in &dataset.samples {
            let t = encoder.taps(&s.image)?;
            let mask = match weights.get(s.class_id).and_then(|w| w.as_ref()) {
                Some(w) => Some(cam(&t.high_level, w)?.resized(image_size, image_size)?),
                None => None,
            };
            taps.push(t);
            pseudo.push(mask);
        }
        let reference: Vec<usize> = (0..taps.len()).filter(|&i| pseudo[i].is_some()).collect();
        let scales = [0, 1, 2].map(|level| channel_rms(reference.iter().map(|&i| taps[i].as_array()[level])));
        for t in &mut taps {
            for (tap, scale) in [&mut t.low_level, &mut t.mid_level, &mut t.high_level]
                .into_iter()
                .zip(&scales)
            {
                scale_channels(tap, scale);
            }
        }
        Ok(Self {
            taps,
            pseudo,
            image_size,
        })
    }

    pub fn pseudo_mask(&self, index: usize) -> Result<&Tensor> {
        self.pseudo
            .get(index)
            .and_then(|m| m.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("no pseudo-mask for image {index}")))
    }
}

/// Per-channel root mean square over a set of `C x H x W` maps.
fn channel_rms<'a>(maps: impl Iterator<Item = &'a Tensor>) -> Vec<f32> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for m in maps {
        let c = m.shape()[0];
        let plane = m.numel() / c;
        acc.resize(c, 0.0);
        for (ch, a) in acc.iter_mut().enumerate() {
            *a += m.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>();
        }
        count += plane;
    }
    acc.iter()
        .map(|&a| ((a / count.max(1) as f64).sqrt() as f32).max(1e-3))
        .collect()
}

fn scale_channels(t: &mut Tensor, rms: &[f32]) {
    let plane = t.numel() / rms.len();
    for (ch, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let inv = 1.0 / rms[ch];
        chunk.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Single-tap stand-in for the frequency-aware module: one 3x3 conv on the
/// last tap, resized to the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams<T> {
    pub proj: ConvParams<T>,
}

impl<T> ParamTree<T> for BaselineParams<T> {
    type Mapped<U> = BaselineParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<BaselineParams<U>, E> {
        Ok(BaselineParams {
            proj: self.proj.try_map_leaves(&join(prefix, "proj"), f)?,
        })
    }
}

/// Trainable episode-level parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub cfm: Option<CfmParams<T>>,
    pub baseline: Option<BaselineParams<T>>,
    pub adapter: Option<AdapterParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelParams<U>, E> {
        Ok(ModelParams {
            cfm: self.cfm.try_map_leaves(&join(prefix, "cfm"), f)?,
            baseline: self.baseline.try_map_leaves(&join(prefix, "baseline"), f)?,
            adapter: self.adapter.try_map_leaves(&join(prefix, "adapter"), f)?,
            head: self.head.try_map_leaves(&join(prefix, "head"), f)?,
        })
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let cn = cfg.feature_channels();
        let (cfm, baseline) = if cfg.variant.cfm {
            (Some(CfmParams::init(&cfg.cfm, rng)), None)
        } else {
            let c3 = cfg.cfm.backbone_channels[2];
            let proj = ConvParams::init(cn, c3, 3, 1.0, rng);
            (None, Some(BaselineParams { proj }))
        };
        let adapter = cfg
            .variant
            .csm
            .then(|| AdapterParams::init(cfg.adapter.size, cfg.embed_dim, rng));
        Self {
            cfm,
            baseline,
            adapter,
            head: HeadParams::init(cn, cfg.head.hidden, rng),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves("").iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Features on the canonical grid for one image's taps.
pub fn image_features(
    g: &mut Graph,
    taps: &BackboneTaps<Tensor>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let tv = BackboneTaps {
        low_level: g.constant(taps.low_level.clone()),
        mid_level: g.constant(taps.mid_level.clone()),
        high_level: g.constant(taps.high_level.clone()),
    };
    match (&p.cfm, &p.baseline) {
        (Some(c), _) => cfm_from_taps(g, &tv, c, &cfg.cfm),
        (None, Some(b)) => {
            let x = conv_same(g, tv.high_level, &b.proj)?;
            g.bilinear_resize(x, CANONICAL_GRID, CANONICAL_GRID)
        }
        (None, None) => Err(Error::InvalidArgument("model has no feature module".into())),
    }
}

/// Query starting mask from the supports: a prototype is pooled from each
/// support's features under its predicted mask, and the query features are
/// scored against it like a class activation map.
pub fn prototype_prior(g: &mut Graph, support: &[(Var, Var)], query: Var) -> Result<Var> {
    let (c, h, w) = crate::cfm::dims3(g, query)?;
    let mut proto: Option<Var> = None;
    for &(features, mask) in support {
        let m = g.bilinear_resize(mask, h, w)?;
        let weighted = g.mul_channel_broadcast(features, m)?;
        let pooled = g.global_avg_pool(weighted)?;
        proto = Some(match proto {
            Some(acc) => g.add(acc, pooled)?,
            None => pooled,
        });
    }
    let proto = proto.ok_or_else(|| Error::InvalidArgument("need at least one support".into()))?;
    let row = g.reshape(proto, &[1, c])?;
    let flat = g.reshape(query, &[c, h * w])?;
    let score = g.matmul(row, flat)?;
    let score = g.reshape(score, &[1, h, w])?;
    let score = g.relu(score);
    Ok(g.max_normalize(score))
}

/// Per-iteration masks for every support and for the query.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    /// `shots x iterations`.
    pub support_masks: Vec<Vec<Var>>,
    pub query_masks: Vec<Var>,
}

pub fn forward_episode(
    g: &mut Graph,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    table: &ClassEmbeddingTable,
    class_id: usize,
    support: &[&BackboneTaps<Tensor>],
    query: &BackboneTaps<Tensor>,
) -> Result<EpisodeOutput> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("an episode needs at least one support".into()));
    }
    let out_side = 2 * query.low_level.shape()[1];
    let mut fs = Vec::with_capacity(support.len());
    for t in support {
        fs.push(image_features(g, t, p, cfg)?);
    }
    let mut fq = image_features(g, query, p, cfg)?;
    if let Some(adapter) = &p.adapter {
        let (s, q) = csm_forward(g, &fs, fq, class_id, table, adapter, &cfg.adapter)?;
        fs = s;
        fq = q;
    }
    let side = g.shape(fq)[1];
    let prior = g.constant(uninformed_prior(side));
    let iters = cfg.head.iterations;
    let mut support_masks = Vec::with_capacity(fs.len());
    let mut pairs = Vec::with_capacity(fs.len());
    for &f in &fs {
        let masks = seg_head(g, f, prior, &p.head, iters, out_side, out_side)?;
        pairs.push((f, *masks.last().expect("at least one iteration")));
        support_masks.push(masks);
    }
    let init_q = prototype_prior(g, &pairs, fq)?;
    let query_masks = seg_head(g, fq, init_q, &p.head, iters, out_side, out_side)?;
    Ok(EpisodeOutput {
        support_masks,
        query_masks,
    })
}

/// Final-iteration query mask thresholded to `{0, 1}`.
pub fn predict_query(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    table: &ClassEmbeddingTable,
    class_id: usize,
    support: &[&BackboneTaps<Tensor>],
    query: &BackboneTaps<Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let out = forward_episode(&mut g, &p, cfg, table, class_id, support, query)?;
    let last = *out.query_masks.last().expect("at least one iteration");
    Ok(binarize(g.value(last)))
}

//! Episode sampling over base/novel splits, the per-iteration training loss,
//! the training loop, and mIoU evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::csm::{gen_pseudo_embeddings, ClassEmbeddingTable};
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    forward_episode, predict_query, pretrain_encoder, EncoderParams, FeatureStore, ModelConfig, ModelParams,
    PretrainConfig,
};
use crate::optim::Sgd;
use crate::params::{bind, with_values, ParamTree};
use crate::tensor::Tensor;

pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = 2;

/// Disjoint base (training) and novel (evaluation) classes for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fold: usize,
    base: Vec<usize>,
    novel: Vec<usize>,
}

impl SplitConfig {
    /// Fold `f` holds out classes `2f` and `2f + 1`.
    pub fn for_fold(fold: usize, num_classes: usize) -> Result<Self> {
        if fold >= NUM_FOLDS {
            return Err(Error::InvalidArgument(format!(
                "fold must be in 0..{NUM_FOLDS}, got {fold}"
            )));
        }
        if num_classes < NUM_FOLDS * CLASSES_PER_FOLD {
            return Err(Error::InvalidArgument(format!(
                "{num_classes} classes cannot fill {NUM_FOLDS} folds of {CLASSES_PER_FOLD}"
            )));
        }
        let novel: Vec<usize> = (fold * CLASSES_PER_FOLD..(fold + 1) * CLASSES_PER_FOLD).collect();
        let base = (0..num_classes).filter(|c| !novel.contains(c)).collect();
        Self::new(fold, base, novel)
    }

    pub fn new(fold: usize, base: Vec<usize>, novel: Vec<usize>) -> Result<Self> {
        let b: BTreeSet<_> = base.iter().collect();
        if b.len() != base.len() || novel.iter().collect::<BTreeSet<_>>().len() != novel.len() {
            return Err(Error::InvalidArgument("class lists contain duplicates".into()));
        }
        if novel.iter().any(|c| b.contains(c)) {
            return Err(Error::InvalidArgument("base and novel classes overlap".into()));
        }
        if base.is_empty() || novel.is_empty() {
            return Err(Error::InvalidArgument(
                "base and novel class lists must be nonempty".into(),
            ));
        }
        Ok(Self { fold, base, novel })
    }

    pub fn base(&self) -> &[usize] {
        &self.base
    }

    pub fn novel(&self) -> &[usize] {
        &self.novel
    }
}

/// One 1-way episode as dataset indices. Ground-truth masks stay in the
/// dataset and are read only by [`evaluate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: usize,
    pub support: Vec<usize>,
    pub query: usize,
}

/// Picks a class uniformly among `classes` with at least `k + 1` images,
/// then `k + 1` distinct images of it.
pub fn sample_episode(dataset: &Dataset, classes: &[usize], k: usize, rng: &mut impl Rng) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "an episode needs at least one support image".into(),
        ));
    }
    let pools: Vec<(usize, Vec<usize>)> = classes
        .iter()
        .map(|&c| (c, dataset.indices_of_class(c)))
        .filter(|(_, idx)| idx.len() > k)
        .collect();
    if pools.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no class among {classes:?} has {} images",
            k + 1
        )));
    }
    let (class_id, pool) = &pools[rng.gen_range(0..pools.len())];
    let picked: Vec<usize> = sample_indices(rng, pool.len(), k + 1)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(Episode {
        class_id: *class_id,
        support: picked[..k].to_vec(),
        query: picked[k],
    })
}

/// `sum_t [alpha * BCE(support_t, pseudo_s) + beta * BCE(query_t, pseudo_q)]`.
/// With several supports the support term is averaged over shots.
pub fn total_loss(
    g: &mut Graph,
    support_masks: &[Vec<Var>],
    query_masks: &[Var],
    pseudo_s: &[Var],
    pseudo_q: Var,
    alpha: f32,
    beta: f32,
) -> Result<Var> {
    if support_masks.is_empty() || support_masks.len() != pseudo_s.len() {
        return shape_err(format!(
            "{} support mask lists for {} support targets",
            support_masks.len(),
            pseudo_s.len()
        ));
    }
    let n = query_masks.len();
    if n == 0 || support_masks.iter().any(|m| m.len() != n) {
        return shape_err("support and query mask lists must have the same nonzero length");
    }
    let mut support_sum: Option<Var> = None;
    let mut query_sum: Option<Var> = None;
    let push = |g: &mut Graph, acc: &mut Option<Var>, term: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
        Ok(())
    };
    for t in 0..n {
        for (masks, &target) in support_masks.iter().zip(pseudo_s) {
            let b = g.bce(masks[t], target)?;
            push(g, &mut support_sum, b)?;
        }
        let b = g.bce(query_masks[t], pseudo_q)?;
        push(g, &mut query_sum, b)?;
    }
    let support = g.scale(
        support_sum.expect("support term recorded"),
        alpha / support_masks.len() as f32,
    );
    let query = g.scale(query_sum.expect("query term recorded"), beta);
    g.add(support, query)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub fold: usize,
    pub shots: usize,
    pub alpha: f32,
    pub beta: f32,
    pub lr: f32,
    pub momentum: f32,
    /// Optimizer steps; each step averages `batch` episodes.
    pub episodes: usize,
    pub batch: usize,
    /// Global gradient norm cap per step; `None` disables clipping.
    pub clip_norm: Option<f32>,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fold: 0,
            shots: 1,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-2,
            momentum: 0.9,
            episodes: 2000,
            batch: 1,
            clip_norm: Some(1.0),
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be nonnegative".into()));
        }
        if self.shots == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("shots and batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(
                "lr must be finite and nonnegative, momentum in [0, 1)".into(),
            ));
        }
        self.model.validate()
    }
}

/// Frozen encoder, its per-image features, and the text embeddings.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub table: ClassEmbeddingTable,
    pub encoder: EncoderParams<Tensor>,
    pub store: FeatureStore,
    pub pretrain_losses: Vec<f32>,
}

/// Pretrains the encoder on base classes and caches features and base-class
/// pseudo-masks. Depends only on the seed, pretraining and encoder settings.
pub fn prepare(
    dataset: &Dataset,
    split: &SplitConfig,
    cfg: &TrainConfig,
    table: ClassEmbeddingTable,
) -> Result<Prepared> {
    cfg.validate()?;
    if table.class_names() != dataset.class_names.as_slice() {
        return Err(Error::InvalidArgument(
            "embedding table classes differ from the dataset's".into(),
        ));
    }
    let (encoder, pretrain_losses) =
        pretrain_encoder(dataset, split.base(), &table, &cfg.model, &cfg.pretrain, cfg.seed)?;
    let store = FeatureStore::build(dataset, &encoder, &table, split.base())?;
    Ok(Prepared {
        table,
        encoder,
        store,
        pretrain_losses,
    })
}

/// Deterministic pseudo text embeddings for the dataset's classes.
pub fn default_table(dataset: &Dataset, cfg: &TrainConfig) -> Result<ClassEmbeddingTable> {
    gen_pseudo_embeddings(&dataset.class_names, cfg.model.embed_dim, cfg.seed)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean episode loss per optimizer step.
    pub losses: Vec<f32>,
    /// Class of every episode drawn, in order.
    pub sampled_classes: Vec<usize>,
    /// Every image index touched by training.
    pub sampled_images: BTreeSet<usize>,
}

fn episode_loss_and_grads(
    params: &ModelParams<Tensor>,
    prepared: &Prepared,
    cfg: &TrainConfig,
    ep: &Episode,
) -> Result<(f32, Vec<Tensor>)> {
    let store = &prepared.store;
    let mut g = Graph::new();
    let pv = bind(&mut g, params, true);
    let support: Vec<_> = ep.support.iter().map(|&i| &store.taps[i]).collect();
    let out = forward_episode(
        &mut g,
        &pv,
        &cfg.model,
        &prepared.table,
        ep.class_id,
        &support,
        &store.taps[ep.query],
    )?;
    let mut targets_s = Vec::with_capacity(ep.support.len());
    for &i in &ep.support {
        targets_s.push(g.constant(store.pseudo_mask(i)?.clone()));
    }
    let target_q = g.constant(store.pseudo_mask(ep.query)?.clone());
    let loss = total_loss(
        &mut g,
        &out.support_masks,
        &out.query_masks,
        &targets_s,
        target_q,
        cfg.alpha,
        cfg.beta,
    )?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, pv.leaves("").into_iter().map(|(_, v)| grads.get(v)).collect()))
}

/// Runs `steps` optimizer steps drawing episodes from `next`.
pub fn run_steps(
    mut params: ModelParams<Tensor>,
    prepared: &Prepared,
    cfg: &TrainConfig,
    steps: usize,
    mut next: impl FnMut(usize) -> Result<Episode>,
) -> Result<(ModelParams<Tensor>, Vec<f32>)> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut acc: Vec<Tensor> = Vec::new();
        let mut total = 0f64;
        for _ in 0..cfg.batch {
            let ep = next(step)?;
            let (loss, grads) = episode_loss_and_grads(&params, prepared, cfg, &ep)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            total += loss as f64;
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        if cfg.batch > 1 {
            let inv = 1.0 / cfg.batch as f32;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        }
        if let Some(cap) = cfg.clip_norm {
            clip_global_norm(&mut acc, cap);
        }
        let mut values: Vec<Tensor> = params.leaves("").into_iter().map(|(_, t)| t).collect();
        opt.step(&mut values, &acc)?;
        params = with_values(&params, values)?;
        losses.push((total / cfg.batch as f64) as f32);
    }
    Ok((params, losses))
}

/// Rescales all gradients together so their joint L2 norm is at most `cap`.
pub fn clip_global_norm(grads: &mut [Tensor], cap: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > cap {
        let k = cap / norm;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x02)
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream)
}

/// Episodic training on base classes only.
pub fn train_prepared(
    dataset: &Dataset,
    split: &SplitConfig,
    cfg: &TrainConfig,
    prepared: &Prepared,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model, &mut model_rng(cfg.seed));
    let mut rng = episode_rng(cfg.seed, 0x03);
    let mut sampled_classes = Vec::new();
    let mut sampled_images = BTreeSet::new();
    let (params, losses) = run_steps(params, prepared, cfg, cfg.episodes, |_| {
        let ep = sample_episode(dataset, split.base(), cfg.shots, &mut rng)?;
        sampled_classes.push(ep.class_id);
        sampled_images.extend(ep.support.iter().copied());
        sampled_images.insert(ep.query);
        Ok(ep)
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            encoder: prepared.encoder.clone(),
            model: params,
            table: prepared.table.clone(),
        },
        losses,
        sampled_classes,
        sampled_images,
    })
}

/// Pretrains, caches features, and trains with pseudo text embeddings.
pub fn train(dataset: &Dataset, split: &SplitConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let table = default_table(dataset, cfg)?;
    let prepared = prepare(dataset, split, cfg, table)?;
    train_prepared(dataset, split, cfg, &prepared)
}

/// Per-class IoU and their mean, both in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Accumulates TP, FP and FN per class over all pairs; a class whose
/// prediction and ground truth are both empty everywhere scores 1.
pub fn miou(preds: &[Tensor], gts: &[Tensor], class_ids: &[usize]) -> Result<MiouReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("miou needs at least one mask pair".into()));
    }
    if preds.len() != gts.len() || preds.len() != class_ids.len() {
        return shape_err(format!(
            "miou got {} predictions, {} ground truths, {} labels",
            preds.len(),
            gts.len(),
            class_ids.len()
        ));
    }
    let mut counts: BTreeMap<usize, [u64; 3]> = BTreeMap::new();
    for ((p, t), &c) in preds.iter().zip(gts).zip(class_ids) {
        if p.shape() != t.shape() {
            return shape_err(format!("prediction {:?} vs ground truth {:?}", p.shape(), t.shape()));
        }
        let e = counts.entry(c).or_insert([0; 3]);
        for (&a, &b) in p.data().iter().zip(t.data()) {
            match (a >= 0.5, b >= 0.5) {
                (true, true) => e[0] += 1,
                (true, false) => e[1] += 1,
                (false, true) => e[2] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(c, [tp, fp, fn_])| {
            let union = tp + fp + fn_;
            (c, if union == 0 { 1.0 } else { tp as f64 / union as f64 })
        })
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MiouReport { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub fold: usize,
    pub episodes: usize,
    pub shots: usize,
    pub classes: Vec<usize>,
    pub model: MiouReport,
    pub constant_foreground: MiouReport,
    pub constant_background: MiouReport,
}

/// Samples `episodes` episodes over `classes` and scores final query masks
/// against ground truth.
pub fn evaluate(
    checkpoint: &Checkpoint,
    store: &FeatureStore,
    dataset: &Dataset,
    classes: &[usize],
    episodes: usize,
    shots: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut rng = episode_rng(seed, 0x04);
    let mut preds = Vec::with_capacity(episodes);
    let mut gts = Vec::with_capacity(episodes);
    let mut ids = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = sample_episode(dataset, classes, shots, &mut rng)?;
        let support: Vec<_> = ep.support.iter().map(|&i| &store.taps[i]).collect();
        preds.push(predict_query(
            &checkpoint.model,
            &checkpoint.config.model,
            &checkpoint.table,
            ep.class_id,
            &support,
            &store.taps[ep.query],
        )?);
        gts.push(dataset.samples[ep.query].mask.clone());
        ids.push(ep.class_id);
    }
    let ones: Vec<Tensor> = gts.iter().map(|t| Tensor::ones(t.shape())).collect();
    let zeros: Vec<Tensor> = gts.iter().map(|t| Tensor::zeros(t.shape())).collect();
    Ok(EvalReport {
        fold: checkpoint.config.fold,
        episodes,
        shots,
        classes: classes.to_vec(),
        model: miou(&preds, &gts, &ids)?,
        constant_foreground: miou(&ones, &gts, &ids)?,
        constant_background: miou(&zeros, &gts, &ids)?,
    })
}

/// `step,loss` rows with shortest round-trip float formatting.
pub fn loss_csv(losses: &[f32]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

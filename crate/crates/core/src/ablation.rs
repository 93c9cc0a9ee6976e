//! Module, adapter-size and loss-weight sweeps over several seeds.
//!
//! Each seed gets its own synthetic dataset (unless one is supplied), its own
//! pretrained encoder, and then one training run per setting; every run is
//! scored on novel-class episodes of the configured fold.

use serde::{Deserialize, Serialize};

use crate::data::{synth_dataset, Dataset};
use crate::episodic::{default_table, evaluate, prepare, train_prepared, SplitConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Images per class of each seed's synthetic dataset.
    pub per_class: usize,
    pub eval_episodes: usize,
    pub variants: Vec<Variant>,
    /// Only variants with the adapter switched on are repeated per size.
    pub adapter_sizes: Vec<usize>,
    pub loss_weights: Vec<(f32, f32)>,
    /// Shared settings; seed, variant, adapter size and loss weights are
    /// overridden per run.
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            per_class: 40,
            eval_episodes: 200,
            variants: vec![Variant::BASELINE, Variant::CFM, Variant::FULL],
            adapter_sizes: vec![25],
            loss_weights: vec![(1.0, 1.0)],
            train: TrainConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty()
            || self.variants.is_empty()
            || self.adapter_sizes.is_empty()
            || self.loss_weights.is_empty()
        {
            return Err(Error::InvalidArgument(
                "ablation needs at least one seed, variant, adapter size and loss weight pair".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(Error::InvalidArgument(
                "ablation needs at least one evaluation episode".into(),
            ));
        }
        for &size in &self.adapter_sizes {
            let mut cfg = self.train.clone();
            cfg.model.adapter.size = size;
            cfg.validate()?;
        }
        Ok(())
    }

    /// Every (variant, adapter size, alpha, beta) setting, in run order.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            let sizes: Vec<Option<usize>> = if variant.csm {
                self.adapter_sizes.iter().map(|&s| Some(s)).collect()
            } else {
                vec![None]
            };
            for adapter_size in sizes {
                for &(alpha, beta) in &self.loss_weights {
                    out.push(Setting {
                        variant,
                        adapter_size,
                        alpha,
                        beta,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Setting {
    pub variant: Variant,
    /// `None` when the variant has no adapter.
    pub adapter_size: Option<usize>,
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub setting: Setting,
    pub novel_miou: f64,
    pub constant_foreground: f64,
    pub final_loss: f32,
}

/// Mean over seeds of one setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SettingSummary {
    pub setting: Setting,
    pub seeds: usize,
    pub mean_miou: f64,
    pub mean_constant_foreground: f64,
}

/// Runs every setting for every seed; `on_row` sees each result as it lands.
pub fn run_ablation(
    cfg: &AblationConfig,
    dataset: Option<&Dataset>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let owned;
        let data = match dataset {
            Some(d) => d,
            None => {
                owned = synth_dataset(seed, cfg.per_class);
                &owned
            }
        };
        let split = SplitConfig::for_fold(cfg.train.fold, data.class_names.len())?;
        let base = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let prepared = prepare(data, &split, &base, default_table(data, &base)?)?;
        for setting in cfg.settings() {
            let mut run = base.clone();
            run.model.variant = setting.variant;
            if let Some(size) = setting.adapter_size {
                run.model.adapter.size = size;
            }
            run.alpha = setting.alpha;
            run.beta = setting.beta;
            let outcome = train_prepared(data, &split, &run, &prepared)?;
            let report = evaluate(
                &outcome.checkpoint,
                &prepared.store,
                data,
                split.novel(),
                cfg.eval_episodes,
                run.shots,
                seed,
            )?;
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
            let row = AblationRow {
                seed,
                setting,
                novel_miou: report.model.mean,
                constant_foreground: report.constant_foreground.mean,
                final_loss: tail.iter().sum::<f32>() / tail.len().max(1) as f32,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Groups rows by setting, keeping first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<SettingSummary> {
    let mut out: Vec<(Setting, Vec<&AblationRow>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(s, _)| *s == r.setting) {
            Some((_, group)) => group.push(r),
            None => out.push((r.setting, vec![r])),
        }
    }
    out.into_iter()
        .map(|(setting, group)| {
            let n = group.len() as f64;
            SettingSummary {
                setting,
                seeds: group.len(),
                mean_miou: group.iter().map(|r| r.novel_miou).sum::<f64>() / n,
                mean_constant_foreground: group.iter().map(|r| r.constant_foreground).sum::<f64>() / n,
            }
        })
        .collect()
}

/// One CSV row per setting.
pub fn summary_csv(summary: &[SettingSummary]) -> String {
    let mut out = String::from("modules,adapter_size,alpha,beta,seeds,mean_miou,constant_foreground\n");
    for s in summary {
        let size = s.setting.adapter_size.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4}\n",
            s.setting.variant.label(),
            size,
            s.setting.alpha,
            s.setting.beta,
            s.seeds,
            s.mean_miou,
            s.mean_constant_foreground
        ));
    }
    out
}

/// One CSV row per (seed, setting) run.
pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("seed,modules,adapter_size,alpha,beta,novel_miou,constant_foreground,final_loss\n");
    for r in rows {
        let size = r.setting.adapter_size.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.seed,
            r.setting.variant.label(),
            size,
            r.setting.alpha,
            r.setting.beta,
            r.novel_miou,
            r.constant_foreground,
            r.final_loss
        ));
    }
    out
}

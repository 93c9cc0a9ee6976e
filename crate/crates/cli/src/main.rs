use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wfss_core::ablation::{rows_csv, run_ablation, summarize, summary_csv, AblationConfig};
use wfss_core::checkpoint::Checkpoint;
use wfss_core::csm::{gen_pseudo_embeddings, ClassEmbeddingTable};
use wfss_core::data::{class_names, gen_dataset, mask_to_pgm, synth_dataset, Dataset};
use wfss_core::episodic::{default_table, evaluate, loss_csv, prepare, train_prepared, SplitConfig, TrainConfig};
use wfss_core::gradcheck::GradCheckOptions;
use wfss_core::gradsuite;
use wfss_core::model::{FeatureStore, Variant};

#[derive(Parser)]
#[command(
    name = "wfss",
    version,
    about = "Weakly-supervised few-shot segmentation on synthetic shapes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override values from `--config`.
#[derive(Args)]
struct Common {
    /// Random seed for data, initialization and episode sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cross-validation fold in 0..4; its two classes are held out as novel.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Support images per episode.
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
}

/// Where images come from: a generated directory, or synthesized in memory
/// from the run seed.
#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Images per class when synthesizing in memory.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Module set: baseline, cfm, csm or cfm+csm.
    #[arg(long)]
    modules: Option<Variant>,
    /// Episodic optimizer steps.
    #[arg(long)]
    episodes: Option<usize>,
    /// Side of the square text grid produced by the spatial adapter.
    #[arg(long)]
    adapter_size: Option<usize>,
    /// Weight of the support-mask loss.
    #[arg(long)]
    alpha: Option<f32>,
    /// Weight of the query-mask loss.
    #[arg(long)]
    beta: Option<f32>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape dataset to PPM/PGM files plus a manifest.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long, default_value_t = 40)]
        per_class: usize,
    },
    /// Write deterministic pseudo text embeddings in CLIPEMB1 format.
    GenEmbeddings {
        /// Output CLIPEMB1 file.
        #[arg(long)]
        out: PathBuf,
        /// Embedding dimension.
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        /// Comma-separated class names; defaults to the shape classes.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
    /// Pretrain the encoder, train episodically, and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// CLIPEMB1 file; pseudo embeddings are generated when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional `step,loss` CSV of the training curve.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score a checkpoint on novel-class episodes of its fold.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluation episodes to sample.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
    },
    /// Finite-difference check of every op and the end-to-end loss.
    Gradcheck {
        /// Number of consecutive seeds, starting at `--seed`.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Coordinates checked per input; 0 checks all.
        #[arg(long, default_value_t = 0)]
        coords: usize,
    },
    /// Write the CAM pseudo-masks of base-class images as PGM files.
    CamDump {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for the PGM files.
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of masks written.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Train and evaluate several settings over several seeds; CSV of means.
    Ablate {
        /// Comma-separated module sets.
        #[arg(long, value_delimiter = ',', default_value = "baseline,cfm,cfm+csm")]
        modules: Vec<Variant>,
        /// Comma-separated adapter grid sides; only module sets with csm use them.
        #[arg(long, value_delimiter = ',', default_value = "25")]
        adapter_sizes: Vec<usize>,
        /// Comma-separated alpha:beta pairs.
        #[arg(long, value_delimiter = ',', default_value = "1:1")]
        loss_weights: Vec<String>,
        /// Comma-separated seeds; overrides `--seed`.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Episodic optimizer steps per run.
        #[arg(long)]
        episodes: Option<usize>,
        /// Novel-class evaluation episodes per run.
        #[arg(long, default_value_t = 200)]
        eval_episodes: usize,
        /// Images per class of each seed's synthetic dataset.
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        /// Summary CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-seed CSV path.
        #[arg(long)]
        rows_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { out, per_class } => {
            let m = gen_dataset(common.seed.unwrap_or(0), per_class, &out)?;
            println!("wrote {} images to {}", m.entries.len(), out.display());
        }
        Command::GenEmbeddings { out, dim, classes } => {
            let names = classes.unwrap_or_else(class_names);
            let table = gen_pseudo_embeddings(&names, dim, common.seed.unwrap_or(0))?;
            table.save(&out)?;
            println!(
                "wrote {} x {} embeddings to {}",
                table.len(),
                table.dim(),
                out.display()
            );
        }
        Command::Train {
            data,
            train,
            embeddings,
            out,
            loss_csv: csv_path,
        } => {
            let cfg = train_config(common, &train)?;
            let dataset = load_data(&data, cfg.seed)?;
            let table = match embeddings {
                Some(p) => ClassEmbeddingTable::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => default_table(&dataset, &cfg)?,
            };
            let split = SplitConfig::for_fold(cfg.fold, dataset.class_names.len())?;
            eprintln!("pretraining encoder on classes {:?}", split.base());
            let prepared = prepare(&dataset, &split, &cfg, table)?;
            eprintln!("training {} for {} steps", cfg.model.variant, cfg.episodes);
            let outcome = train_prepared(&dataset, &split, &cfg, &prepared)?;
            outcome.checkpoint.save(&out)?;
            if let Some(p) = csv_path {
                fs::write(&p, loss_csv(&outcome.losses))?;
            }
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
            println!(
                "saved {}; mean loss over the last {} steps {:.4}",
                out.display(),
                tail.len(),
                tail.iter().sum::<f32>() / tail.len().max(1) as f32
            );
        }
        Command::Eval {
            checkpoint,
            data,
            episodes,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let dataset = load_data(&data, ckpt.config.seed)?;
            let split = SplitConfig::for_fold(ckpt.config.fold, dataset.class_names.len())?;
            let store = FeatureStore::build(&dataset, &ckpt.encoder, &ckpt.table, split.base())?;
            let shots = common.shots.unwrap_or(ckpt.config.shots);
            let seed = common.seed.unwrap_or(ckpt.config.seed);
            let report = evaluate(&ckpt, &store, &dataset, split.novel(), episodes, shots, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck { seeds, coords } => {
            let start = common.seed.unwrap_or(0);
            let opts = GradCheckOptions {
                max_coords: (coords > 0).then_some(coords),
                ..GradCheckOptions::default()
            };
            let mut failures = 0;
            for seed in start..start + seeds {
                for case in gradsuite::run(seed, &opts)? {
                    let ok = case.report.passed();
                    if !ok {
                        failures += 1;
                    }
                    println!(
                        "{} seed={seed} {} max_rel_err={:.2e}",
                        if ok { "ok  " } else { "FAIL" },
                        case.name,
                        case.report.max_rel_err()
                    );
                }
            }
            if failures > 0 {
                bail!("{failures} gradient checks failed");
            }
        }
        Command::CamDump {
            checkpoint,
            data,
            out,
            limit,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let dataset = load_data(&data, ckpt.config.seed)?;
            let split = SplitConfig::for_fold(ckpt.config.fold, dataset.class_names.len())?;
            let store = FeatureStore::build(&dataset, &ckpt.encoder, &ckpt.table, split.base())?;
            fs::create_dir_all(&out)?;
            let mut written = 0;
            for (i, mask) in store.pseudo.iter().enumerate() {
                let Some(mask) = mask else { continue };
                if written == limit {
                    break;
                }
                let name = &dataset.class_names[dataset.samples[i].class_id];
                fs::write(out.join(format!("{i:05}_{name}.pgm")), mask_to_pgm(mask)?)?;
                written += 1;
            }
            println!("wrote {written} masks to {}", out.display());
        }
        Command::Ablate {
            modules,
            adapter_sizes,
            loss_weights,
            seeds,
            episodes,
            eval_episodes,
            per_class,
            out,
            rows_out,
        } => {
            let mut train = base_config(common)?;
            if let Some(n) = episodes {
                train.episodes = n;
            }
            let cfg = AblationConfig {
                seeds,
                per_class,
                eval_episodes,
                variants: modules,
                adapter_sizes,
                loss_weights: loss_weights.iter().map(|s| parse_weights(s)).collect::<Result<_>>()?,
                train,
            };
            let rows = run_ablation(&cfg, None, |r| {
                eprintln!(
                    "seed {} {} adapter {:?} alpha {} beta {}: novel mIoU {:.4}",
                    r.seed, r.setting.variant, r.setting.adapter_size, r.setting.alpha, r.setting.beta, r.novel_miou
                );
            })?;
            let csv = summary_csv(&summarize(&rows));
            match out {
                Some(p) => fs::write(&p, &csv)?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
            if let Some(p) = rows_out {
                fs::write(&p, rows_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn base_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.fold {
        cfg.fold = v;
    }
    if let Some(v) = common.shots {
        cfg.shots = v;
    }
    Ok(cfg)
}

fn train_config(common: &Common, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = base_config(common)?;
    if let Some(v) = a.modules {
        cfg.model.variant = v;
    }
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.adapter_size {
        cfg.model.adapter.size = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Dataset> {
    match &args.data {
        Some(dir) => load_dir(dir),
        None => Ok(synth_dataset(seed, args.per_class)),
    }
}

fn load_dir(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn parse_weights(s: &str) -> Result<(f32, f32)> {
    let (a, b) = s
        .split_once(':')
        .with_context(|| format!("loss weights {s:?} must look like alpha:beta"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

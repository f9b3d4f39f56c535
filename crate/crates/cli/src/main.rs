use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use refseg_core::checkpoint::load_checkpoint;
use refseg_core::dataset::Sample;
use refseg_core::decoder::binarize;
use refseg_core::export::{
    attention_csv, export_dataset, import_dataset, mask_pgm, mask_to_grid, probability_pgm, word_attention_csv,
};
use refseg_core::trainer::{ablate, evaluate, synthetic_splits, train, TrainEvent, TrainOptions, Variant};
use refseg_core::{Error, SegmentationModel, TrainConfig};

#[derive(Parser)]
#[command(name = "refseg", version, about = "Referring segmentation with mutual-aware attention on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic split and write logs, metrics and a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write metrics plus predicted masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen-data`; defaults to the checkpoint's held-out split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        /// Write PGM masks for at most this many samples.
        #[arg(long, default_value_t = 16)]
        masks: usize,
    },
    /// Train the base config and each variant on the same data and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated: no-attn-mask, toi-a, no-fe, ma-blocks=N, tau=X, tau-sweep.
        #[arg(long, value_delimiter = ',', default_value = "no-attn-mask,toi-a,no-fe")]
        variants: Vec<String>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write attention scores, relevance, mask and weights for one sample.
    DumpAttn {
        /// Without a checkpoint the model is freshly initialized from the config flags.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value = "runs/attn")]
        out: PathBuf,
    },
    /// Write the synthetic train and held-out splits to disk.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

/// Flags overriding the config file, which overrides the defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    ma_blocks: Option<usize>,
    #[arg(long)]
    dec_blocks: Option<usize>,
    #[arg(long)]
    no_attn_mask: bool,
    #[arg(long)]
    toi_a: bool,
    /// Feed the deepest visual features straight into the attention stack.
    #[arg(long)]
    no_fe: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    bn_freeze: Option<f64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        opt("tau", self.tau.map(|v| v.to_string()));
        opt("ma_blocks", self.ma_blocks.map(|v| v.to_string()));
        opt("dec_blocks", self.dec_blocks.map(|v| v.to_string()));
        opt("seed", self.seed.map(|v| v.to_string()));
        opt("epochs", self.epochs.map(|v| v.to_string()));
        opt("batch_size", self.batch_size.map(|v| v.to_string()));
        opt("lr", self.lr.map(|v| v.to_string()));
        opt("bn_freeze", self.bn_freeze.map(|v| v.to_string()));
        opt("train_samples", self.train_samples.map(|v| v.to_string()));
        opt("val_samples", self.val_samples.map(|v| v.to_string()));
        opt("eval_every", self.eval_every.map(|v| v.to_string()));
        for (k, v) in pairs {
            c.set(k, &v)?;
        }
        if self.no_attn_mask {
            c.attn_mask = false;
        }
        if self.toi_a {
            c.toi_a = true;
        }
        if self.no_fe {
            c.feature_enhancement = false;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn held_out(config: &TrainConfig, data: Option<&Path>) -> Result<Vec<Sample>> {
    Ok(match data {
        Some(dir) => import_dataset(dir)?,
        None => synthetic_splits(config)?.1,
    })
}

fn cmd_train(config: TrainConfig, out: &Path, max_steps: Option<usize>, quiet: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    write(out, "config.txt", config.to_text())?;
    let (tr, va) = synthetic_splits(&config)?;
    let held = if va.is_empty() { tr.clone() } else { va };
    let mut progress = |e: TrainEvent| {
        if let TrainEvent::Epoch(rec) = e {
            if let Some(r) = &rec.report {
                eprintln!(
                    "epoch {:>4}  step {:>6}  mIoU {:.4}  oIoU {:.4}  Pr@50 {:.1}",
                    rec.epoch, rec.steps, r.mean_iou, r.overall_iou, r.pr[&50]
                );
            }
        }
    };
    let opts = TrainOptions {
        max_steps,
        checkpoint: Some(out.join("model.ckpt")),
        observer: if quiet { None } else { Some(&mut progress) },
    };
    let outcome = train(&config, &tr, &held, opts)?;
    write(out, "loss.csv", outcome.log.loss_csv())?;
    write(out, "eval.csv", outcome.log.eval_csv())?;
    let report = match outcome.log.last_report() {
        Some(r) => r.clone(),
        None => evaluate(&outcome.model, &held, config.binarize_threshold)?,
    };
    write(out, "metrics.csv", report.to_text())?;
    println!("{}", report.to_text().trim_end());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: Option<&Path>, out: &Path, masks: usize) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let samples = held_out(&meta.config, data)?;
    let report = evaluate(&model, &samples, meta.config.binarize_threshold)?;
    fs::create_dir_all(out)?;
    write(out, "metrics.csv", report.to_text())?;
    write(out, "per_sample.csv", report.per_sample_csv())?;
    let d = model.dims();
    let (h, w) = (d.image_height(), d.image_width());
    for (i, s) in samples.iter().take(masks).enumerate() {
        let p = model.predict(s)?;
        let probs = p.probs.data();
        write(out, &format!("pred_{i:05}.pgm"), mask_pgm(h, w, &binarize(probs, meta.config.binarize_threshold))?)?;
        write(out, &format!("prob_{i:05}.pgm"), probability_pgm(h, w, probs)?)?;
        write(out, &format!("gt_{i:05}.pgm"), mask_pgm(h, w, &s.target_bits())?)?;
    }
    println!("{}", report.to_text().trim_end());
    Ok(())
}

fn cmd_ablate(config: TrainConfig, variants: &[String], out: &Path, max_steps: Option<usize>) -> Result<()> {
    let mut list = Vec::new();
    for v in variants {
        list.extend(Variant::parse(v)?);
    }
    let (tr, va) = synthetic_splits(&config)?;
    let table = ablate(&config, &list, &tr, &va, max_steps)?;
    fs::create_dir_all(out)?;
    write(out, "ablation.csv", table.to_text())?;
    println!("{}", table.to_text().trim_end());
    Ok(())
}

fn cmd_dump_attn(model: SegmentationModel, samples: &[Sample], index: usize, threshold: f64, out: &Path) -> Result<()> {
    let s = samples
        .get(index)
        .ok_or_else(|| Error::Input(format!("sample {index} out of range ({} available)", samples.len())))?;
    let o = model.forward(&model.encode(s)?, false)?;
    fs::create_dir_all(out)?;
    let d = *model.dims();
    let (h, w) = (d.image_height(), d.image_width());
    let target_cells = mask_to_grid(&d, &s.target_bits());
    for (k, t) in o.traces.iter().enumerate() {
        write(out, &format!("attention_block{k}.csv"), attention_csv(t))?;
        write(out, &format!("words_block{k}.csv"), word_attention_csv(t, &s.tokens, &target_cells)?)?;
    }
    let probs = o.prediction.probs.data();
    write(out, "prob.pgm", probability_pgm(h, w, probs)?)?;
    write(out, "pred.pgm", mask_pgm(h, w, &binarize(probs, threshold))?)?;
    write(out, "gt.pgm", mask_pgm(h, w, &s.target_bits())?)?;
    write(out, "expression.txt", format!("{}\n", s.expression))?;
    println!("{} blocks written for {:?}", o.traces.len(), s.expression);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            max_steps,
            quiet,
        } => cmd_train(config.resolve()?, &out, max_steps, quiet),
        Command::Eval {
            checkpoint,
            data,
            out,
            masks,
        } => cmd_eval(&checkpoint, data.as_deref(), &out, masks),
        Command::Ablate {
            config,
            variants,
            out,
            max_steps,
        } => cmd_ablate(config.resolve()?, &variants, &out, max_steps),
        Command::DumpAttn {
            checkpoint,
            config,
            data,
            sample,
            out,
        } => {
            let (model, cfg) = match checkpoint {
                Some(p) => {
                    let (m, meta) = load_checkpoint(&p)?;
                    (m, meta.config)
                }
                None => {
                    let c = config.resolve()?;
                    (SegmentationModel::new(&c)?, c)
                }
            };
            let samples = held_out(&cfg, data.as_deref())?;
            cmd_dump_attn(model, &samples, sample, cfg.binarize_threshold, &out)
        }
        Command::GenData { config, out } => {
            let c = config.resolve()?;
            let (tr, va) = synthetic_splits(&c)?;
            export_dataset(&out.join("train"), &tr)?;
            export_dataset(&out.join("val"), &va)?;
            write(&out, "config.txt", c.to_text())?;
            println!("{} train and {} held-out samples written to {}", tr.len(), va.len(), out.display());
            Ok(())
        }
    }
}

/// 2 for configuration problems, 3 for numerical aborts, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numerical(_)) | Some(Error::NonFinite { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Training loop, evaluation and the ablation runner.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::checkpoint::{loss_digest, save_checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::dataset::{generate_dataset, Sample, SceneParams};
use crate::decoder::binarize;
use crate::encoders::EncoderBundle;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{EvalReport, IouAccumulator, PR_THRESHOLDS};
use crate::model::{derive_seed, stream_rng, SeedStream, SegmentationModel};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }

    pub fn digest(&self) -> String {
        loss_digest(self.losses())
    }

    /// Latest held-out report, if any evaluation ran.
    pub fn last_report(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.report.as_ref())
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,total,focal,dice\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{:e},{:.9},{:.9},{:.9}",
                r.step, r.epoch, r.lr, r.total, r.focal, r.dice
            );
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("epoch,steps,overall_iou,mean_iou");
        for x in PR_THRESHOLDS {
            let _ = write!(s, ",pr@{x}");
        }
        s.push('\n');
        for e in &self.epochs {
            if let Some(r) = &e.report {
                let _ = write!(s, "{},{},{:.6},{:.6}", e.epoch, e.steps, r.overall_iou, r.mean_iou);
                for v in r.pr.values() {
                    let _ = write!(s, ",{v:.4}");
                }
                s.push('\n');
            }
        }
        s
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Rewritten after every epoch, so a divergence leaves the last good state.
    pub checkpoint: Option<PathBuf>,
    pub observer: Option<&'a mut dyn FnMut(TrainEvent<'_>)>,
}

pub struct TrainOutcome {
    pub model: SegmentationModel,
    pub log: TrainLog,
    pub meta: CheckpointMeta,
}

/// Mean over samples of `|gt| / pixels`: the IoU of predicting every pixel.
pub fn constant_mask_baseline(samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("baseline over an empty dataset".into()));
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let g = s.target_bits();
            g.iter().filter(|&&b| b).count() as f64 / g.len() as f64
        })
        .sum();
    Ok(total / samples.len() as f64)
}

fn check_dims(model: &SegmentationModel, samples: &[Sample]) -> Result<()> {
    let d = model.dims();
    let want = [d.image_height(), d.image_width(), 3];
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != want || s.tokens.len() != d.max_tokens {
            return Err(Error::Config(format!(
                "sample {i} has image {:?} and {} tokens; model expects {:?} and {}",
                s.image.shape(),
                s.tokens.len(),
                want,
                d.max_tokens
            )));
        }
    }
    Ok(())
}

pub fn encode_all(model: &SegmentationModel, samples: &[Sample]) -> Result<Vec<EncoderBundle>> {
    check_dims(model, samples)?;
    samples.iter().map(|s| model.encode(s)).collect()
}

fn evaluate_encoded(
    model: &SegmentationModel,
    bundles: &[EncoderBundle],
    samples: &[Sample],
    threshold: f64,
) -> Result<EvalReport> {
    let mut acc = IouAccumulator::default();
    for (b, s) in bundles.iter().zip(samples) {
        let out = model.forward(b, false)?;
        acc.add(&binarize(out.prediction.probs.data(), threshold), &s.target_bits())?;
    }
    acc.finish()
}

/// Eval-mode decode and binarization of every sample.
pub fn evaluate(model: &SegmentationModel, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let bundles = encode_all(model, samples)?;
    evaluate_encoded(model, &bundles, samples, threshold)
}

fn numerical(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!("non-finite value in {op}")),
        other => other,
    }
}

/// Adam over the trainable parameters. Each optimizer step averages the
/// gradients of `batch_size` consecutive samples in a seeded shuffled order.
pub fn train(
    config: &TrainConfig,
    train_set: &[Sample],
    held_out: &[Sample],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut model = SegmentationModel::new(config)?;
    let bundles = encode_all(&model, train_set)?;
    let held_bundles = encode_all(&model, held_out)?;
    let targets: Vec<_> = train_set.iter().map(|s| s.target_mask.clone()).collect();
    let weights = LossWeights {
        focal: config.w_focal,
        dice: config.w_dice,
        gamma: config.gamma,
    };
    let mut adam = Adam::default();
    let mut order_rng = stream_rng(config.seed, SeedStream::Order);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let max_steps = opts.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    let mut epoch = 0;

    let mut meta = CheckpointMeta {
        config: config.clone(),
        epoch: 0,
        step: 0,
        loss_digest: log.digest(),
    };

    while epoch < config.epochs && step < max_steps {
        let lr = config.lr_at_epoch(epoch);
        let bn_frozen = epoch >= config.bn_freeze_epoch();
        if bn_frozen && epoch == config.bn_freeze_epoch() {
            model.recalibrate_batch_norm(&bundles).map_err(numerical)?;
        }
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            if step >= max_steps {
                break;
            }
            model.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            let (mut total, mut focal, mut dice) = (0.0, 0.0, 0.0);
            for &i in batch {
                let out = model.forward(&bundles[i], !bn_frozen).map_err(numerical)?;
                let l = total_loss(&out.prediction.probs, &targets[i], &weights).map_err(numerical)?;
                let t = l.total.item()?;
                if !t.is_finite() {
                    return Err(Error::Numerical(format!("loss is {t} at step {step}")));
                }
                l.total.scale(inv)?.backward().map_err(numerical)?;
                total += t * inv;
                focal += l.focal * inv;
                dice += l.dice * inv;
            }
            adam.step(&mut model, lr)?;
            step += 1;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                total,
                focal,
                dice,
            };
            log.steps.push(rec);
            if let Some(obs) = opts.observer.as_mut() {
                obs(TrainEvent::Step(&rec));
            }
        }
        epoch += 1;
        let last = epoch == config.epochs || step >= max_steps;
        let report = if !held_out.is_empty() && (last || epoch % config.eval_every == 0) {
            if !bn_frozen {
                model.recalibrate_batch_norm(&bundles).map_err(numerical)?;
            }
            Some(evaluate_encoded(&model, &held_bundles, held_out, config.binarize_threshold)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            steps: step,
            report,
        };
        if let Some(obs) = opts.observer.as_mut() {
            obs(TrainEvent::Epoch(&rec));
        }
        log.epochs.push(rec);
        meta = CheckpointMeta {
            config: config.clone(),
            epoch,
            step,
            loss_digest: log.digest(),
        };
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(path, &model, &meta)?;
        }
    }
    Ok(TrainOutcome { model, log, meta })
}

/// Synthetic train and held-out splits drawn from the data stream of the
/// master seed. The held-out indices follow the training ones.
pub fn synthetic_splits(config: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let seed = derive_seed(config.seed, SeedStream::Data);
    let params = SceneParams::default();
    let all = generate_dataset(seed, config.train_samples + config.val_samples, &config.dims, &params)?;
    let mut train = all;
    let val = train.split_off(config.train_samples);
    Ok((train, val))
}

/// A configuration change compared against the base run.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Base,
    NoAttnMask,
    ToiA,
    NoFeatureEnhancement,
    MaBlocks(usize),
    Tau(f64),
}

impl Variant {
    /// The ten thresholds 0.05, 0.10, …, 0.50.
    pub fn tau_sweep() -> Vec<Variant> {
        (1..=10).map(|i| Variant::Tau(i as f64 * 0.05)).collect()
    }

    /// Accepts `base`, `no-attn-mask`, `toi-a`, `no-fe`, `ma-blocks=N`,
    /// `tau=X` and `tau-sweep`.
    pub fn parse(name: &str) -> Result<Vec<Variant>> {
        let unknown = || Error::Config(format!("unknown ablation variant {name:?}"));
        Ok(match name.trim() {
            "base" => vec![Variant::Base],
            "no-attn-mask" => vec![Variant::NoAttnMask],
            "toi-a" => vec![Variant::ToiA],
            "no-fe" => vec![Variant::NoFeatureEnhancement],
            "tau-sweep" => Variant::tau_sweep(),
            other => {
                if let Some(n) = other.strip_prefix("ma-blocks=") {
                    vec![Variant::MaBlocks(n.parse().map_err(|_| unknown())?)]
                } else if let Some(t) = other.strip_prefix("tau=") {
                    vec![Variant::Tau(t.parse().map_err(|_| unknown())?)]
                } else {
                    return Err(unknown());
                }
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Base => "base".into(),
            Variant::NoAttnMask => "no-attn-mask".into(),
            Variant::ToiA => "toi-a".into(),
            Variant::NoFeatureEnhancement => "no-fe".into(),
            Variant::MaBlocks(n) => format!("ma-blocks={n}"),
            Variant::Tau(t) => format!("tau={t:.2}"),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        match *self {
            Variant::Base => {}
            Variant::NoAttnMask => c.attn_mask = false,
            Variant::ToiA => c.toi_a = true,
            Variant::NoFeatureEnhancement => c.feature_enhancement = false,
            Variant::MaBlocks(n) => c.ma_blocks = n,
            Variant::Tau(t) => c.tau = t,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub trainable_params: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("method");
        for x in PR_THRESHOLDS {
            let _ = write!(s, ",Pr@{x}");
        }
        s.push_str(",IoU,mIoU,params\n");
        for r in &self.rows {
            s.push_str(&r.variant);
            for v in r.report.pr.values() {
                let _ = write!(s, ",{v:.2}");
            }
            let _ = writeln!(
                s,
                ",{:.2},{:.2},{}",
                100.0 * r.report.overall_iou,
                100.0 * r.report.mean_iou,
                r.trainable_params
            );
        }
        s
    }
}

/// Trains the base config and each variant on the same data and seed.
pub fn ablate(
    config: &TrainConfig,
    variants: &[Variant],
    train_set: &[Sample],
    held_out: &[Sample],
    max_steps: Option<usize>,
) -> Result<AblationTable> {
    if held_out.is_empty() {
        return Err(Error::Input("ablation needs a held-out split".into()));
    }
    let mut list = vec![Variant::Base];
    list.extend(variants.iter().filter(|v| **v != Variant::Base).cloned());
    let mut rows = Vec::with_capacity(list.len());
    for v in &list {
        let c = v.apply(config)?;
        let out = train(
            &c,
            train_set,
            held_out,
            TrainOptions {
                max_steps,
                ..Default::default()
            },
        )?;
        let report = match out.log.last_report() {
            Some(r) => r.clone(),
            None => evaluate(&out.model, held_out, c.binarize_threshold)?,
        };
        rows.push(AblationRow {
            variant: v.name(),
            trainable_params: out.model.trainable_param_count(),
            report,
        });
    }
    Ok(AblationTable { rows })
}

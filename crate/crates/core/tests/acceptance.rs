//! Runs every primary acceptance criterion in sequence and prints one
//! PASS/FAIL line each. The long training criteria dominate the runtime.

mod common;

use std::time::Instant;

use rand::Rng;
use refseg_core::checkpoint::{load_checkpoint, model_records};
use refseg_core::loss::{dice_loss, focal_loss};
use refseg_core::metrics::{iou, precision_at, EvalReport, PR_THRESHOLDS};
use refseg_core::mutual::MaskMode;
use refseg_core::trainer::{ablate, constant_mask_baseline, evaluate, synthetic_splits, train, TrainOptions, Variant};
use refseg_core::{SegmentationModel, Tensor, TrainConfig};

type Outcome = Result<String, String>;

/// Freeze fraction used by the training criteria; see the README.
const BN_FREEZE: f64 = 0.3;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let cases = common::gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let worst = cases.iter().filter(|c| !(c.error < c.tol)).map(|c| format!("{}={:.2e}", c.name, c.error)).collect::<Vec<_>>();
    let max = cases.iter().map(|c| c.error / c.tol).fold(0.0, f64::max);
    check(
        worst.is_empty() && secs < 120.0,
        format!("{} cases, worst error/tol {max:.1e}, {secs:.1}s {}", cases.len(), worst.join(" ")),
    )
}

fn attention() -> Outcome {
    let s = common::attention_oracle(200, 7).map_err(|e| e.to_string())?;
    check(
        s.draws >= 100 && s.max_weight_error < 1e-12 && s.keep_mismatches == 0,
        format!(
            "{} draws, weight err {:.1e}, score err {:.1e}, keep mismatches {}",
            s.draws, s.max_weight_error, s.max_score_error, s.keep_mismatches
        ),
    )
}

fn metrics() -> Outcome {
    let mut r = common::rng(3);
    let mut bad = 0;
    for _ in 0..10_000 {
        let p: Vec<bool> = (0..64).map(|_| r.gen_bool(0.5)).collect();
        let g: Vec<bool> = (0..64).map(|_| r.gen_bool(0.5)).collect();
        let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        if iou(&p, &g).map_err(|e| e.to_string())? != want {
            bad += 1;
        }
    }
    let mut pr_bad = 0;
    let mut order_bad = 0;
    for _ in 0..200 {
        let n = r.gen_range(1..40);
        let masks: Vec<(Vec<bool>, Vec<bool>)> = (0..n)
            .map(|_| ((0..64).map(|_| r.gen_bool(0.5)).collect(), (0..64).map(|_| r.gen_bool(0.5)).collect()))
            .collect();
        let rep = EvalReport::from_masks(masks.iter().map(|(a, b)| (a.as_slice(), b.as_slice()))).map_err(|e| e.to_string())?;
        for &x in &PR_THRESHOLDS {
            let direct = rep.per_sample.iter().filter(|&&v| v > x as f64 / 100.0).count() as f64 * 100.0 / n as f64;
            if precision_at(&rep.per_sample, x).map_err(|e| e.to_string())? != direct || rep.pr[&x] != direct {
                pr_bad += 1;
            }
        }
        if PR_THRESHOLDS.windows(2).any(|w| rep.pr[&w[1]] > rep.pr[&w[0]]) {
            order_bad += 1;
        }
    }
    check(
        bad == 0 && pr_bad == 0 && order_bad == 0,
        format!("iou mismatches {bad}/10000, Pr@X mismatches {pr_bad}, non-monotone reports {order_bad}"),
    )
}

fn losses() -> Outcome {
    let e = |x: refseg_core::Error| x.to_string();
    let focal = focal_loss(&Tensor::new(&[1], vec![0.5]).map_err(e)?, &Tensor::new(&[1], vec![1.0]).map_err(e)?, 2.0)
        .and_then(|t| t.item())
        .map_err(e)?;
    let y = Tensor::new(&[8, 8], (0..64).map(|i| f64::from(i % 2 == 0)).collect()).map_err(e)?;
    let dice = dice_loss(&Tensor::full(&[8, 8], 0.5).map_err(e)?, &y).and_then(|t| t.item()).map_err(e)?;
    let mut r = common::rng(5);
    let mut bce_err: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.999)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.5))).collect();
        let want = p.iter().zip(&t).map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum::<f64>() / n as f64;
        let got = focal_loss(&Tensor::new(&[n], p).map_err(e)?, &Tensor::new(&[n], t).map_err(e)?, 0.0)
            .and_then(|t| t.item())
            .map_err(e)?;
        bce_err = bce_err.max((got - want).abs());
    }
    check(
        (focal - 0.173287).abs() <= 1e-6 && (dice - 0.5).abs() <= 1e-6 && bce_err <= 1e-12,
        format!("focal {focal:.7}, dice {dice:.7}, gamma=0 vs BCE {bce_err:.1e}"),
    )
}

fn overfit() -> Outcome {
    let mut c = TrainConfig::default();
    c.train_samples = 8;
    c.val_samples = 0;
    c.batch_size = 1;
    c.epochs = 375;
    c.eval_every = c.epochs;
    c.bn_freeze = BN_FREEZE;
    let (tr, _) = synthetic_splits(&c).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = train(&c, &tr, &tr, TrainOptions::default()).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let steps = out.log.losses().len();
    let r = out.log.last_report().ok_or("no report")?;
    check(
        steps <= 3000 && r.mean_iou > 0.90 && r.pr[&50] == 100.0 && secs < 900.0,
        format!("{steps} steps, mIoU {:.4}, Pr@50 {:.1}, {secs:.0}s", r.mean_iou, r.pr[&50]),
    )
}

struct Desk {
    base_miou: f64,
    baseline: f64,
    no_mask_miou: f64,
    table: String,
    structural: Result<(), String>,
}

fn desk_scale() -> Result<Desk, String> {
    let e = |x: refseg_core::Error| x.to_string();
    let mut c = TrainConfig::default();
    c.train_samples = 256;
    c.val_samples = 64;
    c.eval_every = c.epochs;
    c.bn_freeze = BN_FREEZE;
    let (tr, va) = synthetic_splits(&c).map_err(e)?;
    let baseline = constant_mask_baseline(&va).map_err(e)?;
    let table = ablate(&c, &[Variant::NoAttnMask], &tr, &va, None).map_err(e)?;

    // Disabling the mask must keep every real token and give a plain softmax.
    let nm = Variant::NoAttnMask.apply(&c).map_err(e)?;
    let model = SegmentationModel::new(&nm).map_err(e)?;
    let structural = (|| {
        if model.mutual.mode != MaskMode::Disabled {
            return Err("mask mode not disabled".to_string());
        }
        for s in va.iter().take(8) {
            let out = model.forward(&model.encode(s).map_err(e)?, false).map_err(e)?;
            let keep = s.token_keep();
            for t in &out.traces {
                let lt = keep.len();
                for i in 0..t.scores.len() / lt {
                    let row = &t.scores[i * lt..(i + 1) * lt];
                    let m = (0..lt).filter(|&j| keep[j]).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..lt).filter(|&j| keep[j]).map(|j| (row[j] - m).exp()).sum();
                    for j in 0..lt {
                        let want = if keep[j] { (row[j] - m).exp() / z } else { 0.0 };
                        if t.kept[i * lt + j] != keep[j] || (t.weights[i * lt + j] - want).abs() > 1e-12 {
                            return Err(format!("entry ({i},{j}) not a plain softmax"));
                        }
                    }
                }
            }
        }
        Ok(())
    })();
    Ok(Desk {
        base_miou: table.rows[0].report.mean_iou,
        baseline,
        no_mask_miou: table.rows[1].report.mean_iou,
        table: table.to_text(),
        structural,
    })
}

fn generalization(d: &Desk) -> Outcome {
    check(
        d.base_miou >= d.baseline + 0.25,
        format!("held-out mIoU {:.4}, constant-mask baseline {:.4}", d.base_miou, d.baseline),
    )
}

fn ablation(d: &Desk) -> Outcome {
    let e = |x: refseg_core::Error| x.to_string();
    let c = TrainConfig::default();
    let base = SegmentationModel::new(&c).map_err(e)?;
    let no_fe = SegmentationModel::new(&Variant::NoFeatureEnhancement.apply(&c).map_err(e)?).map_err(e)?;
    let base_names = base.trainable_param_names();
    let fe_names = no_fe.trainable_param_names();
    let removed: Vec<&String> = base_names.iter().filter(|n| !fe_names.contains(n)).collect();
    let fe_ok = !removed.is_empty()
        && removed.iter().all(|n| n.starts_with("featenh."))
        && fe_names.iter().all(|n| base_names.contains(n));
    let noise_ok = d.no_mask_miou <= d.base_miou + 0.02;
    check(
        noise_ok && d.structural.is_ok() && fe_ok,
        format!(
            "no-attn-mask {:.4} vs base {:.4}, structural {:?}, no-fe removes {} featenh tensors\n{}",
            d.no_mask_miou,
            d.base_miou,
            d.structural,
            removed.len(),
            d.table.trim_end()
        ),
    )
}

fn peft() -> Outcome {
    let e = |x: refseg_core::Error| x.to_string();
    let mut c = TrainConfig::default();
    c.train_samples = 16;
    c.val_samples = 4;
    c.epochs = 2;
    let (tr, va) = synthetic_splits(&c).map_err(e)?;
    let before = SegmentationModel::new(&c).map_err(e)?;
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let path = dir.path().join("peft.ckpt");
    let out = train(
        &c,
        &tr,
        &va,
        TrainOptions {
            checkpoint: Some(path.clone()),
            ..Default::default()
        },
    )
    .map_err(e)?;
    let stray: Vec<String> = out
        .model
        .trainable_param_names()
        .into_iter()
        .filter(|n| !(n.starts_with("featenh.") || n.starts_with("mutualattn.") || n.starts_with("madecoder.")))
        .collect();
    let hash_ok = before.encoders.digest() == out.model.encoders.digest();
    let (loaded, meta) = load_checkpoint(&path).map_err(e)?;
    let mut bitwise = model_records(&loaded) == model_records(&out.model) && meta == out.meta;
    for s in &va {
        let a = out.model.predict(s).map_err(e)?;
        let b = loaded.predict(s).map_err(e)?;
        bitwise &= a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let re = evaluate(&loaded, &va, c.binarize_threshold).map_err(e)?;
    bitwise &= out.log.last_report().is_some_and(|r| r.mean_iou == re.mean_iou);
    check(
        stray.is_empty() && hash_ok && bitwise,
        format!(
            "{} trainable tensors, stray {stray:?}, stub hash unchanged {hash_ok}, checkpoint bitwise {bitwise}",
            out.model.trainable_param_names().len()
        ),
    )
}

fn determinism() -> Outcome {
    let e = |x: refseg_core::Error| x.to_string();
    let mut c = TrainConfig::default();
    c.train_samples = 400;
    c.val_samples = 1;
    c.eval_every = 1000;
    let (tr, va) = synthetic_splits(&c).map_err(e)?;
    let run = || -> Result<Vec<u64>, String> {
        let out = train(
            &c,
            &tr,
            &va,
            TrainOptions {
                max_steps: Some(50),
                ..Default::default()
            },
        )
        .map_err(e)?;
        Ok(out.log.losses().iter().map(|v| v.to_bits()).collect())
    };
    let a = run()?;
    let b = run()?;
    check(a.len() == 50 && a == b, format!("{} logged steps, identical {}", a.len(), a == b))
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    let (tag, detail) = match o {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {n}. {name}: {detail}");
    o.is_ok()
}

fn main() {
    let t0 = Instant::now();
    let mut ok = true;
    ok &= report(1, "gradient integrity", &gradients());
    ok &= report(2, "masked-attention oracle", &attention());
    ok &= report(3, "metric oracles", &metrics());
    ok &= report(4, "loss spot values", &losses());
    ok &= report(5, "overfit", &overfit());
    match desk_scale() {
        Ok(d) => {
            ok &= report(6, "generalization", &generalization(&d));
            ok &= report(7, "ablation directions", &ablation(&d));
        }
        Err(err) => {
            ok &= report(6, "generalization", &Err(err.clone()));
            ok &= report(7, "ablation directions", &Err(err));
        }
    }
    ok &= report(8, "parameter-efficient training contract", &peft());
    ok &= report(9, "determinism", &determinism());
    println!("acceptance finished in {:.0}s", t0.elapsed().as_secs_f64());
    if !ok {
        std::process::exit(1);
    }
}

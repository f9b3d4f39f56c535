#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use refseg_core::config::Dims;
use refseg_core::dataset::token_id;
use refseg_core::decoder::MaskDecoder;
use refseg_core::enhance::FeatureEnhancement;
use refseg_core::gradcheck::{check_gradients, relative_error, FD_STEP};
use refseg_core::loss::{dice_loss, focal_loss};
use refseg_core::mutual::{keep_threshold, MaskMode, MutualAttentionStack};
use refseg_core::nn::Module;
use refseg_core::{Result, SegmentationModel, Tensor, TrainConfig};

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normal(rng, n)).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
pub fn weighted_sum(out: &Tensor, seed: u64) -> Result<Tensor> {
    let r = randn(&mut rng(seed), out.shape());
    out.mul(&r)?.sum()
}

pub fn tiny_dims() -> Dims {
    Dims {
        h: 4,
        w: 4,
        c: 16,
        c_text: 8,
        max_tokens: 4,
        vocab: 24,
    }
}

pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.dims = tiny_dims();
    c
}

pub fn tiny_tokens() -> Vec<usize> {
    vec![
        token_id("the").unwrap(),
        token_id("red").unwrap(),
        token_id("circle").unwrap(),
        0,
    ]
}

/// Compares reverse-mode parameter gradients of `loss` with central
/// differences. `coords` limits the check to that many random trainable
/// coordinates; `None` checks all of them.
pub fn module_grad_error<M: Module>(
    m: &mut M,
    coords: Option<usize>,
    seed: u64,
    loss: impl Fn(&M) -> Result<Tensor>,
) -> Result<f64> {
    m.visit_params(&mut |p| p.zero_grad());
    loss(m)?.backward()?;
    let mut slots = Vec::new();
    let mut grads = Vec::new();
    let mut pi = 0;
    m.visit_params(&mut |p| {
        if !p.is_frozen() {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.data().len()]);
            for (k, v) in g.into_iter().enumerate() {
                slots.push((pi, k));
                grads.push(v);
            }
        }
        pi += 1;
    });
    let chosen: Vec<usize> = match coords {
        None => (0..slots.len()).collect(),
        Some(n) => {
            let mut r = rng(seed);
            (0..n).map(|_| r.gen_range(0..slots.len())).collect()
        }
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &c in &chosen {
        let (target, k) = slots[c];
        let eval_at = |delta: f64, m: &mut M| -> Result<f64> {
            let mut pi = 0;
            let mut res = Ok(());
            m.visit_params_mut(&mut |p| {
                if pi == target {
                    let mut d = p.data().to_vec();
                    d[k] += delta;
                    res = p.set_data(d);
                }
                pi += 1;
            });
            res?;
            loss(m)?.item()
        };
        let up = eval_at(FD_STEP, m)?;
        let down = eval_at(-2.0 * FD_STEP, m)?;
        eval_at(FD_STEP, m)?;
        analytic.push(grads[c]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

fn case(name: &'static str, tol: f64, error: Result<f64>) -> GradCase {
    GradCase {
        name,
        error: error.unwrap_or(f64::INFINITY),
        tol,
    }
}

/// Smallest distance between any mutual-attention score and the keep
/// threshold over the whole stack.
fn mask_margin(stack: &MutualAttentionStack, f_v: &Tensor, f_l: &Tensor, pe: &Tensor, keep: &[bool], tau: f64) -> f64 {
    let (_, traces) = stack.forward(f_v, f_l, pe, keep).unwrap();
    let thr = keep_threshold(tau);
    traces
        .iter()
        .flat_map(|t| t.scores.iter().map(move |s| (s - thr).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Every differentiable primitive and each composite, as worst relative
/// error against central differences.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let a = randn(&mut r, &[3, 4]);
    let b = randn(&mut r, &[4, 5]);
    let b_t = randn(&mut r, &[5, 4]);
    let c = randn(&mut r, &[3, 4]);
    let row = randn(&mut r, &[4]);
    let ops: Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|v| weighted_sum(&v[0].matmul(&v[1])?, 1))),
        ("matmul_nt", vec![a.clone(), b_t.clone()], Box::new(|v| weighted_sum(&v[0].matmul_nt(&v[1])?, 2))),
        ("matmul_tn", vec![c.clone(), randn(&mut r, &[3, 5])], Box::new(|v| weighted_sum(&v[0].matmul_tn(&v[1])?, 3))),
        ("transpose", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].transpose()?, 4))),
        ("add", vec![a.clone(), c.clone()], Box::new(|v| weighted_sum(&v[0].add(&v[1])?, 5))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|v| weighted_sum(&v[0].sub(&v[1])?, 6))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|v| weighted_sum(&v[0].mul(&v[1])?, 7))),
        ("scale", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].scale(-1.7)?, 8))),
        ("add_scalar", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].mul(&v[0])?.add_scalar(0.3)?, 9))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|v| weighted_sum(&v[0].add_row(&v[1])?, 10))),
        ("sum", vec![a.clone()], Box::new(|v| v[0].mul(&v[0])?.sum())),
        ("mean", vec![a.clone()], Box::new(|v| v[0].mul(&v[0])?.mean())),
        ("reshape", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].reshape(&[2, 6])?, 11))),
        ("concat_last", vec![a.clone(), randn(&mut r, &[3, 2])], Box::new(|v| weighted_sum(&Tensor::concat_last(&[&v[0], &v[1]])?, 12))),
        ("concat_rows", vec![a.clone(), randn(&mut r, &[2, 4])], Box::new(|v| weighted_sum(&Tensor::concat_rows(&[&v[0], &v[1]])?, 13))),
        ("slice_rows", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].slice_rows(1, 2)?, 14))),
        ("slice_cols", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].slice_cols(1, 2)?, 15))),
        ("gelu", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].gelu()?, 16))),
        ("sigmoid", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].sigmoid()?, 17))),
        ("softmax_rows", vec![a.clone()], Box::new(|v| weighted_sum(&v[0].softmax_rows()?, 18))),
        (
            "softmax_rows_masked",
            vec![a.clone()],
            Box::new(|v| {
                let keep = [true, false, true, true, false, true, true, true, true, true, false, false];
                weighted_sum(&v[0].softmax_rows_masked(&keep)?, 19)
            }),
        ),
        ("layer_norm", vec![a.clone(), randn(&mut r, &[4]), randn(&mut r, &[4])], Box::new(|v| weighted_sum(&v[0].layer_norm(&v[1], &v[2])?, 20))),
        (
            "batch_norm",
            vec![randn(&mut r, &[3, 3, 2]), randn(&mut r, &[2]), randn(&mut r, &[2])],
            Box::new(|v| {
                let mut st = refseg_core::tensor::RunningStats::new(2);
                weighted_sum(&v[0].batch_norm(&v[1], &v[2], &mut st, true)?, 21)
            }),
        ),
        (
            "batch_norm_eval",
            vec![randn(&mut r, &[3, 3, 2]), randn(&mut r, &[2]), randn(&mut r, &[2])],
            Box::new(|v| {
                let mut st = refseg_core::tensor::RunningStats::new(2);
                st.mean = vec![0.3, -0.2];
                st.var = vec![1.5, 0.7];
                weighted_sum(&v[0].batch_norm(&v[1], &v[2], &mut st, false)?, 22)
            }),
        ),
        (
            "conv3x3",
            vec![randn(&mut r, &[4, 5, 3]), randn(&mut r, &[3, 3, 3, 2]), randn(&mut r, &[2])],
            Box::new(|v| weighted_sum(&v[0].conv3x3(&v[1], &v[2])?, 23)),
        ),
        (
            "transposed_conv2x",
            vec![randn(&mut r, &[2, 3, 3]), randn(&mut r, &[3, 2, 2, 2]), randn(&mut r, &[2])],
            Box::new(|v| weighted_sum(&v[0].transposed_conv2x(&v[1], &v[2])?, 24)),
        ),
    ];
    for (name, inputs, f) in ops {
        out.push(case(name, OP_TOL, check_gradients(&inputs, f)));
    }

    let probs = uniform(&mut r, &[4, 4], 0.05, 0.95);
    let targets = Tensor::new(&[4, 4], (0..16).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
    let t1 = targets.clone();
    out.push(case(
        "focal_loss",
        COMPOSITE_TOL,
        check_gradients(std::slice::from_ref(&probs), move |v| focal_loss(&v[0], &t1, 2.0)),
    ));
    let t2 = targets.clone();
    out.push(case(
        "dice_loss",
        COMPOSITE_TOL,
        check_gradients(&[probs], move |v| dice_loss(&v[0], &t2)),
    ));

    out.push(case("enhance", COMPOSITE_TOL, enhance_error()));
    out.push(case("ma_stack", COMPOSITE_TOL, ma_stack_error()));
    out.push(case("decoder_block", COMPOSITE_TOL, decoder_block_error()));
    out.push(case("decode", COMPOSITE_TOL, decode_error()));
    out.push(case("full_model", COMPOSITE_TOL, full_model_error()));
    out
}

/// Inputs and all parameters of the enhancement module on a 4×4×8 map.
pub fn enhance_error() -> Result<f64> {
    let mut r = rng(21);
    let mut fe = FeatureEnhancement::new(8, 1, &mut r)?;
    let f = [randn(&mut r, &[4, 4, 8]), randn(&mut r, &[4, 4, 8]), randn(&mut r, &[4, 4, 8])];
    let inputs = check_gradients(&f, |v| weighted_sum(&fe.forward(&v[0], &v[1], &v[2], true)?, 31))?;
    let params = module_grad_error(&mut fe, None, 0, |m| {
        weighted_sum(&m.forward(&f[0], &f[1], &f[2], true)?, 31)
    })?;
    Ok(inputs.max(params))
}

pub fn ma_stack_error() -> Result<f64> {
    let tau = 0.35;
    let keep = vec![true, true, true, false];
    for seed in 0..50u64 {
        let mut r = rng(100 + seed);
        let mut stack = MutualAttentionStack::new(8, 6, 8, 2, MaskMode::Threshold(tau), &mut r)?;
        let f_v = randn(&mut r, &[9, 8]);
        let f_l = randn(&mut r, &[4, 6]);
        let pe = randn(&mut r, &[4, 6]).scale(0.1)?;
        // Finite differences must not flip a keep decision.
        if mask_margin(&stack, &f_v, &f_l, &pe, &keep, tau) < 1e-3 {
            continue;
        }
        let loss = |s: &MutualAttentionStack, fv: &Tensor, fl: &Tensor| -> Result<Tensor> {
            let (m, _) = s.forward(fv, fl, &pe, &keep)?;
            weighted_sum(&m.f_lav, 41)?.add(&weighted_sum(&m.f_val, 42)?)
        };
        let inputs = check_gradients(&[f_v.clone(), f_l.clone()], |v| loss(&stack, &v[0], &v[1]))?;
        let params = module_grad_error(&mut stack, None, 0, |s| loss(s, &f_v, &f_l))?;
        return Ok(inputs.max(params));
    }
    Err(refseg_core::Error::Contract("no draw with a safe mask margin".into()))
}

/// One decoder block with `L_v = 16`, `L_t = 4`, `C = 16`.
pub fn decoder_block_error() -> Result<f64> {
    let mut r = rng(31);
    let dec = MaskDecoder::new(&tiny_dims(), 1, 4, false, &mut r)?;
    let mut block = dec.blocks[0].clone();
    let f_lav = randn(&mut r, &[16, 16]);
    let f_c = randn(&mut r, &[5, 16]);
    let keep = vec![true, true, true, true, false];
    let loss = |b: &refseg_core::decoder::DecoderBlock, x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let (lav, ctx) = b.forward(x, y, &keep)?;
        weighted_sum(&lav, 51)?.add(&weighted_sum(&ctx, 52)?)
    };
    let inputs = check_gradients(&[f_lav.clone(), f_c.clone()], |v| loss(&block, &v[0], &v[1]))?;
    let params = module_grad_error(&mut block, None, 0, |b| loss(b, &f_lav, &f_c))?;
    Ok(inputs.max(params))
}

/// The whole decoder on `H = W = 4`, `C = 16`, `L_t = 4`, through the
/// focal and dice losses.
pub fn decode_error() -> Result<f64> {
    let mut r = rng(41);
    let d = tiny_dims();
    let mut dec = MaskDecoder::new(&d, 2, 4, false, &mut r)?;
    let f_lav = randn(&mut r, &[16, 16]);
    let f_val = randn(&mut r, &[4, 16]);
    let keep = vec![true, true, true, false];
    let target = Tensor::new(&[16, 16], (0..256).map(|i| f64::from((i / 16) % 5 < 2)).collect())?;
    let loss = |m: &MaskDecoder, x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let p = m.forward(x, y, &keep, true)?;
        focal_loss(&p.probs, &target, 2.0)?.add(&dice_loss(&p.probs, &target)?)
    };
    let inputs = check_gradients(&[f_lav.clone(), f_val.clone()], |v| loss(&dec, &v[0], &v[1]))?;
    let params = module_grad_error(&mut dec, None, 0, |m| loss(m, &f_lav, &f_val))?;
    Ok(inputs.max(params))
}

/// Ten random trainable scalars of the full model at tiny dims.
pub fn full_model_error() -> Result<f64> {
    let cfg = tiny_config();
    let d = cfg.dims;
    for seed in 0..50u64 {
        let mut c = cfg.clone();
        c.seed = seed;
        let mut model = SegmentationModel::new(&c)?;
        let mut r = rng(500 + seed);
        let image = uniform(&mut r, &[d.image_height(), d.image_width(), 3], 0.0, 1.0);
        let bundle = model.encoders.encode(&image, &tiny_tokens())?;
        let out = model.forward(&bundle, true)?;
        let thr = keep_threshold(cfg.tau);
        let margin = out
            .traces
            .iter()
            .flat_map(|t| t.scores.iter().map(move |s| (s - thr).abs()))
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-3 {
            continue;
        }
        let target = Tensor::new(
            &[d.image_height(), d.image_width()],
            (0..d.image_height() * d.image_width()).map(|i| f64::from(i % 7 < 3)).collect(),
        )?;
        return module_grad_error(&mut model, Some(10), seed, |m| {
            let p = m.forward(&bundle, true)?.prediction.probs;
            focal_loss(&p, &target, 2.0)?.add(&dice_loss(&p, &target)?)
        });
    }
    Err(refseg_core::Error::Contract("no draw with a safe mask margin".into()))
}

pub struct AttentionOracleSummary {
    pub draws: usize,
    pub max_weight_error: f64,
    pub max_score_error: f64,
    pub keep_mismatches: usize,
}

/// Random single-block draws checked against a loop-based reference: scores
/// `Z_v Z_lᵀ / √C`, the keep rule `score > ln((1−τ)/τ)` and per-row softmax
/// renormalized over the kept entries only.
pub fn attention_oracle(draws: usize, seed: u64) -> Result<AttentionOracleSummary> {
    use refseg_core::mutual::MutualAttentionBlock;
    let mut r = rng(seed);
    let mut sum = AttentionOracleSummary {
        draws: 0,
        max_weight_error: 0.0,
        max_score_error: 0.0,
        keep_mismatches: 0,
    };
    for d in 0..draws {
        let (lv, lt, cv, ct, c) = (r.gen_range(1..10), r.gen_range(1..7), r.gen_range(2..6), r.gen_range(2..6), r.gen_range(2..9));
        let tau = r.gen_range(0.02..0.98);
        let block = MutualAttentionBlock::new(&format!("draw{d}"), cv, ct, c, &mut r)?;
        let f_v = randn(&mut r, &[lv, cv]).scale(r.gen_range(0.3..2.0))?;
        let f_l = randn(&mut r, &[lt, ct]);
        let mut keep: Vec<bool> = (0..lt).map(|_| r.gen_bool(0.8)).collect();
        keep[0] = true;
        let (_, trace) = block.forward(&f_v, &f_l, &keep, MaskMode::Threshold(tau))?;

        let proj = |x: &Tensor, w: &Tensor, rows: usize, k: usize| -> Vec<f64> {
            let mut z = vec![0.0; rows * c];
            for i in 0..rows {
                for o in 0..c {
                    z[i * c + o] = (0..k).map(|q| x.data()[i * k + q] * w.data()[q * c + o]).sum();
                }
            }
            z
        };
        let z_v = proj(&f_v, block.w_v.tensor(), lv, cv);
        let z_l = proj(&f_l, block.w_l.tensor(), lt, ct);
        let thr = ((1.0 - tau) / tau).ln();
        for i in 0..lv {
            let s: Vec<f64> = (0..lt)
                .map(|j| (0..c).map(|q| z_v[i * c + q] * z_l[j * c + q]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            for j in 0..lt {
                sum.max_score_error = sum.max_score_error.max((s[j] - trace.scores[i * lt + j]).abs());
                let rule = keep[j] && s[j] > thr;
                let fell_back = trace.fallback_rows.contains(&i) || trace.fallback_cols.contains(&j);
                if !fell_back && rule != trace.kept[i * lt + j] {
                    sum.keep_mismatches += 1;
                }
            }
            // Renormalize over the kept set the block reports.
            let kept: Vec<usize> = (0..lt).filter(|&j| trace.kept[i * lt + j]).collect();
            let m = kept.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = kept.iter().map(|&j| (s[j] - m).exp()).sum();
            for j in 0..lt {
                let want = if trace.kept[i * lt + j] { (s[j] - m).exp() / z } else { 0.0 };
                sum.max_weight_error = sum.max_weight_error.max((want - trace.weights[i * lt + j]).abs());
            }
        }
        sum.draws += 1;
    }
    Ok(sum)
}

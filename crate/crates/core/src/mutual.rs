//! Mutual-aware attention: one score matrix between visual and linguistic
//! tokens feeds two parallel branches.
//!
//! ```text
//! Z_v = F_v·W_v            Z_l = F_l·W_l
//! S   = Z_v·Z_lᵀ / √C
//! M   = 1 / (1 + e^S)                      (relevance)
//! 𝓜   = 0 where M < τ, −∞ otherwise
//! A   = Softmax(S + 𝓜)                     (row-wise, L_v×L_t)
//! F_lav = LayerNorm(A·Z_l + Z_v)
//! F_val = LayerNorm(Aᵀ·Z_v + Z_l)
//! ```
//!
//! Because `M` is a decreasing function of the score, `M < τ` keeps exactly
//! the pairs with `S > ln((1 − τ)/τ)`, i.e. the most similar ones.
//!
//! Padding tokens are always masked. If masking would leave a linguistic
//! column (the support of a row of `Aᵀ`) empty, that column is unmasked;
//! then any visual row left empty is unmasked across all real tokens. The
//! mask is a constant with respect to differentiation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_vec, LayerNorm, Module, Param};
use crate::tensor::Tensor;

/// Language-aware visual (`L_v×C`) and vision-aware linguistic (`L_t×C`)
/// features.
#[derive(Debug, Clone)]
pub struct MutualFeatures {
    pub f_lav: Tensor,
    pub f_val: Tensor,
}

/// Intermediate values of one block, detached from the graph.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub visual_tokens: usize,
    pub text_tokens: usize,
    /// Pre-mask logits `Z_v Z_lᵀ/√C`.
    pub scores: Vec<f64>,
    /// `1/(1 + e^score)`.
    pub relevance: Vec<f64>,
    /// Entries that took part in the softmax, after padding and fallbacks.
    pub kept: Vec<bool>,
    /// Post-softmax attention weights `A`.
    pub weights: Vec<f64>,
    /// Visual rows whose mask was dropped because every entry was masked.
    pub fallback_rows: Vec<usize>,
    /// Token columns unmasked because every entry was masked.
    pub fallback_cols: Vec<usize>,
}

/// `ln((1 − τ)/τ)`: scores strictly above it are kept.
pub fn keep_threshold(tau: f64) -> f64 {
    ((1.0 - tau) / tau).ln()
}

pub fn relevance(score: f64) -> f64 {
    1.0 / (1.0 + score.exp())
}

/// Attention gate applied before the softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    /// Keep pairs whose relevance is below `τ`.
    Threshold(f64),
    /// Plain softmax over all real tokens.
    Disabled,
}

/// Computes the kept pattern for an `rows×cols` score matrix.
/// Returns `(kept, fallback_rows, fallback_cols)`.
pub fn build_mask(
    scores: &[f64],
    rows: usize,
    cols: usize,
    token_keep: &[bool],
    mode: MaskMode,
) -> Result<(Vec<bool>, Vec<usize>, Vec<usize>)> {
    if token_keep.len() != cols || scores.len() != rows * cols {
        return Err(Error::shape(
            "attention mask",
            format!("{} scores, {} token flags for {rows}×{cols}", scores.len(), token_keep.len()),
        ));
    }
    if !token_keep.iter().any(|&k| k) {
        return Err(Error::Input("expression has no tokens".into()));
    }
    let mut kept: Vec<bool> = scores
        .iter()
        .enumerate()
        .map(|(idx, &s)| {
            token_keep[idx % cols]
                && match mode {
                    MaskMode::Threshold(tau) => relevance(s) < tau,
                    MaskMode::Disabled => true,
                }
        })
        .collect();
    let mut fallback_cols = Vec::new();
    for j in (0..cols).filter(|&j| token_keep[j]) {
        if (0..rows).all(|i| !kept[i * cols + j]) {
            (0..rows).for_each(|i| kept[i * cols + j] = true);
            fallback_cols.push(j);
        }
    }
    let mut fallback_rows = Vec::new();
    for i in 0..rows {
        let row = &mut kept[i * cols..(i + 1) * cols];
        if !row.iter().any(|&k| k) {
            row.iter_mut().zip(token_keep).for_each(|(k, &t)| *k = t);
            fallback_rows.push(i);
        }
    }
    Ok((kept, fallback_rows, fallback_cols))
}

#[derive(Debug, Clone)]
pub struct MutualAttentionBlock {
    pub w_v: Param,
    pub w_l: Param,
    pub norm_v: LayerNorm,
    pub norm_l: LayerNorm,
    channels: usize,
}

impl MutualAttentionBlock {
    pub fn new(name: &str, visual_in: usize, text_in: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MutualAttentionBlock {
            w_v: Param::new(
                format!("{name}.w_v"),
                &[visual_in, channels],
                normal_vec(rng, visual_in * channels, 1.0 / (visual_in as f64).sqrt()),
                false,
            )?,
            w_l: Param::new(
                format!("{name}.w_l"),
                &[text_in, channels],
                normal_vec(rng, text_in * channels, 1.0 / (text_in as f64).sqrt()),
                false,
            )?,
            norm_v: LayerNorm::new(&format!("{name}.norm_v"), channels)?,
            norm_l: LayerNorm::new(&format!("{name}.norm_l"), channels)?,
            channels,
        })
    }

    pub fn forward(
        &self,
        f_v: &Tensor,
        f_l: &Tensor,
        token_keep: &[bool],
        mode: MaskMode,
    ) -> Result<(MutualFeatures, AttentionTrace)> {
        let (lv, _) = f_v.dims2("mutual attention")?;
        let (lt, _) = f_l.dims2("mutual attention")?;
        let z_v = f_v.matmul(self.w_v.tensor())?;
        let z_l = f_l.matmul(self.w_l.tensor())?;
        let scores = z_v.matmul_nt(&z_l)?.scale(1.0 / (self.channels as f64).sqrt())?;
        let (kept, fallback_rows, fallback_cols) = build_mask(scores.data(), lv, lt, token_keep, mode)?;
        let a = scores.softmax_rows_masked(&kept)?;
        let f_lav = self.norm_v.forward(&a.matmul(&z_l)?.add(&z_v)?)?;
        let f_val = self.norm_l.forward(&a.matmul_tn(&z_v)?.add(&z_l)?)?;
        let trace = AttentionTrace {
            visual_tokens: lv,
            text_tokens: lt,
            relevance: scores.data().iter().map(|&s| relevance(s)).collect(),
            scores: scores.to_vec(),
            kept,
            weights: a.to_vec(),
            fallback_rows,
            fallback_cols,
        };
        Ok((MutualFeatures { f_lav, f_val }, trace))
    }
}

impl Module for MutualAttentionBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w_v);
        f(&self.w_l);
        self.norm_v.visit_params(f);
        self.norm_l.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_v);
        f(&mut self.w_l);
        self.norm_v.visit_params_mut(f);
        self.norm_l.visit_params_mut(f);
    }
}

/// Sequential blocks; the first maps `C′`-wide text features, later ones
/// consume the previous block's `C`-wide outputs.
#[derive(Debug, Clone)]
pub struct MutualAttentionStack {
    pub blocks: Vec<MutualAttentionBlock>,
    pub mode: MaskMode,
}

impl MutualAttentionStack {
    pub fn new(
        visual_in: usize,
        text_in: usize,
        channels: usize,
        n_blocks: usize,
        mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("at least one mutual attention block".into()));
        }
        if let MaskMode::Threshold(t) = mode {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("tau {t} outside (0, 1)")));
            }
        }
        let blocks = (0..n_blocks)
            .map(|i| {
                let (v, t) = if i == 0 { (visual_in, text_in) } else { (channels, channels) };
                MutualAttentionBlock::new(&format!("mutualattn.{i}"), v, t, channels, rng)
            })
            .collect::<Result<_>>()?;
        Ok(MutualAttentionStack { blocks, mode })
    }

    /// Adds `pos_enc` to the text features once, then runs every block.
    pub fn forward(
        &self,
        f_v: &Tensor,
        f_l: &Tensor,
        pos_enc: &Tensor,
        token_keep: &[bool],
    ) -> Result<(MutualFeatures, Vec<AttentionTrace>)> {
        let mut feats = MutualFeatures {
            f_lav: f_v.clone(),
            f_val: f_l.add(pos_enc)?,
        };
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, trace) = block.forward(&feats.f_lav, &feats.f_val, token_keep, self.mode)?;
            feats = next;
            traces.push(trace);
        }
        Ok((feats, traces))
    }
}

impl Module for MutualAttentionStack {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
    }
}

//! Mutual-aware mask decoder.
//!
//! A single trainable query token is stacked on top of the vision-aware
//! linguistic features, `F_c = [F_m; F_val]`. Each decoder block runs
//!
//! ```text
//! F̂_lav = MHSA(F_lav) + F_lav
//! F̂_c   = MHSA(F_c) + F_c
//! F̄_lav = MHCA(F̂_lav, F̂_c, F̂_c) + F̂_lav
//! ```
//!
//! and hands `(F̄_lav, F̂_c)` to the next block. The final visual stream is
//! upsampled 4× by two transposed-conv/BN blocks (GeLU after the first), the
//! evolved query token goes through an MLP, and their per-pixel inner
//! product gives the mask logits.

use rand::Rng;

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::nn::{normal_vec, BatchNorm, Mlp, Module, MultiHeadAttention, NamedStats, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// `4H×4W` pre-sigmoid values.
    pub logits: Tensor,
    /// `sigmoid(logits)`.
    pub probs: Tensor,
}

/// Pixels at or above `threshold` become foreground.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= threshold).collect()
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub visual_self: MultiHeadAttention,
    pub context_self: MultiHeadAttention,
    pub cross: MultiHeadAttention,
    /// Token-to-image attention, present only in the ablation variant.
    pub token_to_image: Option<MultiHeadAttention>,
}

impl DecoderBlock {
    fn new(name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DecoderBlock {
            visual_self: MultiHeadAttention::new(&format!("{name}.visual_self"), c, heads, rng)?,
            context_self: MultiHeadAttention::new(&format!("{name}.context_self"), c, heads, rng)?,
            cross: MultiHeadAttention::new(&format!("{name}.cross"), c, heads, rng)?,
            token_to_image: None,
        })
    }

    /// `context_keep` flags the rows of `f_c` usable as keys (the query
    /// token and real words).
    pub fn forward(&self, f_lav: &Tensor, f_c: &Tensor, context_keep: &[bool]) -> Result<(Tensor, Tensor)> {
        let (_, c) = f_lav.dims2("decoder block")?;
        let (_, cc) = f_c.dims2("decoder block")?;
        if c != cc {
            return Err(Error::shape("decoder block", format!("visual width {c}, context width {cc}")));
        }
        let lav_hat = self.visual_self.self_attend(f_lav, None)?.add(f_lav)?;
        let mut c_hat = self.context_self.self_attend(f_c, Some(context_keep))?.add(f_c)?;
        if let Some(toi) = &self.token_to_image {
            c_hat = toi.attend(&c_hat, &lav_hat, &lav_hat, None)?.add(&c_hat)?;
        }
        let lav_bar = self
            .cross
            .attend(&lav_hat, &c_hat, &c_hat, Some(context_keep))?
            .add(&lav_hat)?;
        Ok((lav_bar, c_hat))
    }
}

impl Module for DecoderBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.visual_self.visit_params(f);
        self.context_self.visit_params(f);
        self.cross.visit_params(f);
        if let Some(t) = &self.token_to_image {
            t.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visual_self.visit_params_mut(f);
        self.context_self.visit_params_mut(f);
        self.cross.visit_params_mut(f);
        if let Some(t) = &mut self.token_to_image {
            t.visit_params_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    pub kernel: Param,
    pub bias: Param,
    pub norm: BatchNorm,
}

impl Upsample {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Upsample {
            kernel: Param::new(
                format!("{name}.kernel"),
                &[cin, 2, 2, cout],
                normal_vec(rng, cin * 4 * cout, (2.0 / cin as f64).sqrt()),
                false,
            )?,
            bias: Param::new(format!("{name}.bias"), &[cout], vec![0.0; cout], false)?,
            norm: BatchNorm::new(&format!("{name}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.norm
            .forward(&x.transposed_conv2x(self.kernel.tensor(), self.bias.tensor())?, training)
    }
}

impl Module for Upsample {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.kernel);
        f(&self.bias);
        self.norm.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
        f(&mut self.bias);
        self.norm.visit_params_mut(f);
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        self.norm.visit_stats(f);
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub query: Param,
    pub blocks: Vec<DecoderBlock>,
    pub up1: Upsample,
    pub up2: Upsample,
    pub head: Mlp,
    h: usize,
    w: usize,
}

impl MaskDecoder {
    /// Token-to-image layers, when requested, are drawn from `rng` after
    /// every base parameter so the base weights do not depend on the flag.
    pub fn new(dims: &Dims, n_blocks: usize, heads: usize, toi_a: bool, rng: &mut impl Rng) -> Result<Self> {
        let c = dims.c;
        if !c.is_multiple_of(4) {
            return Err(Error::Config(format!("decoder width {c} is not divisible by 4")));
        }
        if n_blocks == 0 {
            return Err(Error::Config("at least one decoder block".into()));
        }
        let query = Param::new("madecoder.query_token", &[1, c], normal_vec(rng, c, 1.0), false)?;
        let mut blocks = (0..n_blocks)
            .map(|i| DecoderBlock::new(&format!("madecoder.block{i}"), c, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let up1 = Upsample::new("madecoder.up1", c, c / 2, rng)?;
        let up2 = Upsample::new("madecoder.up2", c / 2, c / 4, rng)?;
        let head = Mlp::new("madecoder.head", &[c, c, c, c / 4], rng)?;
        if toi_a {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.token_to_image = Some(MultiHeadAttention::new(
                    &format!("madecoder.block{i}.token_to_image"),
                    c,
                    heads,
                    rng,
                )?);
            }
        }
        Ok(MaskDecoder {
            query,
            blocks,
            up1,
            up2,
            head,
            h: dims.h,
            w: dims.w,
        })
    }

    /// Runs the decoder blocks and returns `(F̄_lav, F̂_c)`.
    pub fn run_blocks(&self, f_lav: &Tensor, f_val: &Tensor, token_keep: &[bool]) -> Result<(Tensor, Tensor)> {
        let (lt, _) = f_val.dims2("decode")?;
        if token_keep.len() != lt {
            return Err(Error::shape("decode", format!("{} token flags for {lt} tokens", token_keep.len())));
        }
        let mut keep = Vec::with_capacity(lt + 1);
        keep.push(true);
        keep.extend_from_slice(token_keep);
        let mut lav = f_lav.clone();
        let mut ctx = Tensor::concat_rows(&[self.query.tensor(), f_val])?;
        for b in &self.blocks {
            (lav, ctx) = b.forward(&lav, &ctx, &keep)?;
        }
        Ok((lav, ctx))
    }

    pub fn forward(&self, f_lav: &Tensor, f_val: &Tensor, token_keep: &[bool], training: bool) -> Result<MaskPrediction> {
        let (lv, c) = f_lav.dims2("decode")?;
        if lv != self.h * self.w {
            return Err(Error::shape(
                "decode",
                format!("{lv} visual tokens for a {}×{} map", self.h, self.w),
            ));
        }
        let (lav, ctx) = self.run_blocks(f_lav, f_val, token_keep)?;
        let map = lav.reshape(&[self.h, self.w, c])?;
        let up = self.up1.forward(&map, training)?.gelu()?;
        let up = self.up2.forward(&up, training)?;
        let (oh, ow, oc) = up.dims3("decode")?;
        let emb = self.head.forward(&ctx.slice_rows(0, 1)?)?;
        let logits = up.reshape(&[oh * ow, oc])?.matmul_nt(&emb)?.reshape(&[oh, ow])?;
        let probs = logits.sigmoid()?;
        Ok(MaskPrediction { logits, probs })
    }
}

impl Module for MaskDecoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.query);
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.up1.visit_params(f);
        self.up2.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.query);
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.up1.visit_params_mut(f);
        self.up2.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        self.up1.visit_stats(f);
        self.up2.visit_stats(f);
    }
}

//! Hyperparameters and the flat `key = value` config file format.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Feature-map and vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Feature map height; images are `4h` tall.
    pub h: usize,
    pub w: usize,
    /// Visual channel width.
    pub c: usize,
    /// Linguistic channel width.
    pub c_text: usize,
    /// Padded expression length.
    pub max_tokens: usize,
    pub vocab: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            h: 16,
            w: 16,
            c: 64,
            c_text: 32,
            max_tokens: 12,
            vocab: 24,
        }
    }
}

impl Dims {
    pub fn image_height(&self) -> usize {
        4 * self.h
    }

    pub fn image_width(&self) -> usize {
        4 * self.w
    }

    pub fn visual_tokens(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dims: Dims,
    pub tau: f64,
    pub ma_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub gamma: f64,
    pub w_focal: f64,
    pub w_dice: f64,
    pub binarize_threshold: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// Fractions of the total epoch count at which the learning rate decays.
    pub milestones: Vec<f64>,
    pub epochs: usize,
    /// Samples whose gradients are accumulated into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub attn_mask: bool,
    pub toi_a: bool,
    pub feature_enhancement: bool,
    /// Fraction of the epochs after which batch-norm layers stop using
    /// per-sample statistics: the running statistics are re-estimated once
    /// over the training set and used, fixed, for the remaining steps.
    /// `1` keeps per-sample statistics throughout.
    pub bn_freeze: f64,
    freeze_stubs: bool,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Evaluate on the held-out split every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: Dims::default(),
            tau: 0.35,
            ma_blocks: 2,
            dec_blocks: 2,
            heads: 4,
            gamma: 2.0,
            w_focal: 0.5,
            w_dice: 0.5,
            binarize_threshold: 0.35,
            lr: 1e-4,
            lr_decay: 0.1,
            milestones: vec![0.6, 0.84],
            epochs: 50,
            batch_size: 8,
            seed: 0,
            attn_mask: true,
            toi_a: false,
            feature_enhancement: true,
            bn_freeze: 1.0,
            freeze_stubs: true,
            train_samples: 256,
            val_samples: 64,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Encoders are always frozen; the field exists so config files can state it.
    pub fn freeze_stubs(&self) -> bool {
        self.freeze_stubs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dims;
        if d.h == 0 || d.w == 0 || d.c == 0 || d.c_text == 0 || d.max_tokens == 0 {
            return bad("dimensions must be positive".into());
        }
        if !d.c.is_multiple_of(4) {
            return bad(format!("channel width {} is not divisible by 4", d.c));
        }
        if d.c < 2 || d.c_text < 2 {
            return bad("channel widths must be at least 2".into());
        }
        if d.vocab < crate::dataset::VOCABULARY.len() {
            return bad(format!(
                "vocabulary size {} is smaller than the {} built-in tokens",
                d.vocab,
                crate::dataset::VOCABULARY.len()
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if self.ma_blocks == 0 || self.dec_blocks == 0 {
            return bad("block counts must be at least 1".into());
        }
        if self.heads == 0 || !d.c.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, d.c));
        }
        if self.gamma < 0.0 || self.w_focal < 0.0 || self.w_dice < 0.0 {
            return bad("loss weights and gamma must be non-negative".into());
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad(format!(
                "binarize threshold {} outside (0, 1)",
                self.binarize_threshold
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1])
            || self.milestones.iter().any(|m| !(0.0..=1.0).contains(m))
        {
            return bad("milestones must be sorted fractions in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.bn_freeze) {
            return bad(format!("bn_freeze {} outside [0, 1]", self.bn_freeze));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive".into());
        }
        if !self.freeze_stubs {
            return bad("encoder stubs cannot be unfrozen".into());
        }
        if self.train_samples == 0 {
            return bad("train_samples must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// First epoch (0-based) trained with fixed batch-norm statistics;
    /// equal to `epochs` when they never freeze.
    pub fn bn_freeze_epoch(&self) -> usize {
        ((self.bn_freeze * self.epochs as f64).round() as usize).min(self.epochs)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
            }
        }
        let key_norm = key.trim().replace('-', "_");
        let v = value.trim();
        match key_norm.as_str() {
            "h" => self.dims.h = num(key, v)?,
            "w" => self.dims.w = num(key, v)?,
            "c" => self.dims.c = num(key, v)?,
            "c_text" => self.dims.c_text = num(key, v)?,
            "max_tokens" => self.dims.max_tokens = num(key, v)?,
            "vocab" => self.dims.vocab = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "ma_blocks" => self.ma_blocks = num(key, v)?,
            "dec_blocks" => self.dec_blocks = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "w_focal" => self.w_focal = num(key, v)?,
            "w_dice" => self.w_dice = num(key, v)?,
            "binarize_threshold" => self.binarize_threshold = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "milestones" => {
                self.milestones = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "attn_mask" => self.attn_mask = flag(key, v)?,
            "toi_a" => self.toi_a = flag(key, v)?,
            "feature_enhancement" => self.feature_enhancement = flag(key, v)?,
            "bn_freeze" => self.bn_freeze = num(key, v)?,
            "freeze_stubs" => self.freeze_stubs = flag(key, v)?,
            "train_samples" => self.train_samples = num(key, v)?,
            "val_samples" => self.val_samples = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat config file: one `key = value` per line, `#` comments.
    /// Keys not present keep their current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("h", d.h.to_string());
        kv("w", d.w.to_string());
        kv("c", d.c.to_string());
        kv("c_text", d.c_text.to_string());
        kv("max_tokens", d.max_tokens.to_string());
        kv("vocab", d.vocab.to_string());
        kv("tau", self.tau.to_string());
        kv("ma_blocks", self.ma_blocks.to_string());
        kv("dec_blocks", self.dec_blocks.to_string());
        kv("heads", self.heads.to_string());
        kv("gamma", self.gamma.to_string());
        kv("w_focal", self.w_focal.to_string());
        kv("w_dice", self.w_dice.to_string());
        kv("binarize_threshold", self.binarize_threshold.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv(
            "milestones",
            self.milestones
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("attn_mask", self.attn_mask.to_string());
        kv("toi_a", self.toi_a.to_string());
        kv("feature_enhancement", self.feature_enhancement.to_string());
        kv("bn_freeze", self.bn_freeze.to_string());
        kv("freeze_stubs", self.freeze_stubs.to_string());
        kv("train_samples", self.train_samples.to_string());
        kv("val_samples", self.val_samples.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }
}

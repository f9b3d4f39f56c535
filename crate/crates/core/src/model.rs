use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Dims, TrainConfig};
use crate::dataset::Sample;
use crate::decoder::{MaskDecoder, MaskPrediction};
use crate::encoders::{EncoderBundle, StubEncoders};
use crate::enhance::FeatureEnhancement;
use crate::error::Result;
use crate::mutual::{AttentionTrace, MaskMode, MutualAttentionStack, MutualFeatures};
use crate::nn::{Module, NamedStats, Param};
use crate::tensor::Tensor;

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Encoders = 1,
    Data = 2,
    Init = 3,
    Order = 4,
}

pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

pub fn stream_rng(master: u64, stream: SeedStream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Everything a forward pass produces besides the mask.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub prediction: MaskPrediction,
    pub mutual: MutualFeatures,
    pub traces: Vec<AttentionTrace>,
}

/// Frozen encoders followed by the trainable enhancement, mutual attention
/// and decoder.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub encoders: StubEncoders,
    /// `None` in the variant that feeds the deep features straight in.
    pub enhance: Option<FeatureEnhancement>,
    pub mutual: MutualAttentionStack,
    pub decoder: MaskDecoder,
    dims: Dims,
}

impl SegmentationModel {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims;
        let encoders = StubEncoders::new(&d, derive_seed(config.seed, SeedStream::Encoders))?;
        let mut rng = stream_rng(config.seed, SeedStream::Init);
        let enhance = if config.feature_enhancement {
            Some(FeatureEnhancement::new(d.c, 1, &mut rng)?)
        } else {
            None
        };
        let mode = if config.attn_mask {
            MaskMode::Threshold(config.tau)
        } else {
            MaskMode::Disabled
        };
        let mutual = MutualAttentionStack::new(d.c, d.c_text, d.c, config.ma_blocks, mode, &mut rng)?;
        let decoder = MaskDecoder::new(&d, config.dec_blocks, config.heads, config.toi_a, &mut rng)?;
        Ok(SegmentationModel {
            encoders,
            enhance,
            mutual,
            decoder,
            dims: d,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn encode(&self, sample: &Sample) -> Result<EncoderBundle> {
        self.encoders.encode_sample(sample)
    }

    /// Enhanced visual tokens, `L_v×C`.
    pub fn visual_tokens(&self, bundle: &EncoderBundle, training: bool) -> Result<Tensor> {
        match &self.enhance {
            Some(fe) => fe.forward(&bundle.f_v1, &bundle.f_v2, &bundle.f_v3, training),
            None => bundle.f_v3.reshape(&[self.dims.visual_tokens(), self.dims.c]),
        }
    }

    pub fn forward(&self, bundle: &EncoderBundle, training: bool) -> Result<ModelOutput> {
        let f_v = self.visual_tokens(bundle, training)?;
        let (mutual, traces) = self
            .mutual
            .forward(&f_v, &bundle.f_l, &bundle.pos_enc, &bundle.token_keep)?;
        let prediction = self
            .decoder
            .forward(&mutual.f_lav, &mutual.f_val, &bundle.token_keep, training)?;
        Ok(ModelOutput {
            prediction,
            mutual,
            traces,
        })
    }

    /// Eval-mode prediction for a raw sample.
    pub fn predict(&self, sample: &Sample) -> Result<MaskPrediction> {
        Ok(self.forward(&self.encode(sample)?, false)?.prediction)
    }

    /// Re-estimates every batch-norm running statistic as the pooled
    /// population statistic over `bundles`, using training-mode forwards.
    pub fn recalibrate_batch_norm(&self, bundles: &[EncoderBundle]) -> Result<()> {
        self.visit_stats(&mut |s| s.stats.lock().expect("stats lock").begin_calibration());
        let mut res = Ok(());
        for b in bundles {
            if let Err(e) = self.forward(b, true) {
                res = Err(e);
                break;
            }
        }
        self.visit_stats(&mut |s| {
            s.stats.lock().expect("stats lock").finish_calibration();
        });
        res
    }

    pub fn trainable_param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| {
            if !p.is_frozen() {
                v.push(p.name().to_string());
            }
        });
        v
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if !p.is_frozen() {
                n += p.data().len();
            }
        });
        n
    }

    pub fn zero_grad(&self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

impl Module for SegmentationModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoders.visit_params(f);
        if let Some(fe) = &self.enhance {
            fe.visit_params(f);
        }
        self.mutual.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoders.visit_params_mut(f);
        if let Some(fe) = &mut self.enhance {
            fe.visit_params_mut(f);
        }
        self.mutual.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        if let Some(fe) = &self.enhance {
            fe.visit_stats(f);
        }
        self.decoder.visit_stats(f);
    }
}

//! Feature enhancement: fuses shallow, middle and deep visual features.
//!
//! ```text
//! F̂  = CBA([MLP(F_v1), MLP(F_v2)])
//! F_v = CBA([MLP(F̂),   MLP(F_v3)])
//! ```
//!
//! MLPs act per position (one hidden layer of width C). A CBA block is
//! 3×3 conv → batch norm → GeLU, mapping the 2C concatenation back to C.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_vec, BatchNorm, Mlp, Module, NamedStats, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ConvBnAct {
    layers: Vec<(Param, Param, BatchNorm)>,
}

impl ConvBnAct {
    /// `depth` conv/BN/GeLU triples; the first maps `input → output`
    /// channels, the rest `output → output`.
    pub fn new(name: &str, input: usize, output: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("CBA depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|i| {
                let cin = if i == 0 { input } else { output };
                let std = (2.0 / (9 * cin) as f64).sqrt();
                Ok((
                    Param::new(
                        format!("{name}.{i}.conv.kernel"),
                        &[3, 3, cin, output],
                        normal_vec(rng, 9 * cin * output, std),
                        false,
                    )?,
                    Param::new(format!("{name}.{i}.conv.bias"), &[output], vec![0.0; output], false)?,
                    BatchNorm::new(&format!("{name}.{i}.bn"), output)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(ConvBnAct { layers })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, b, bn) in &self.layers {
            h = bn.forward(&h.conv3x3(k.tensor(), b.tensor())?, training)?.gelu()?;
        }
        Ok(h)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.layers.iter().map(|(_, _, bn)| bn)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.layers.iter_mut().map(|(_, _, bn)| bn)
    }

    pub fn kernels_mut(&mut self) -> impl Iterator<Item = (&mut Param, &mut Param)> {
        self.layers.iter_mut().map(|(k, b, _)| (k, b))
    }
}

impl Module for ConvBnAct {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for (k, b, bn) in &self.layers {
            f(k);
            f(b);
            bn.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (k, b, bn) in &mut self.layers {
            f(k);
            f(b);
            bn.visit_params_mut(f);
        }
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        self.batch_norms().for_each(|bn| bn.visit_stats(f));
    }
}

#[derive(Debug, Clone)]
pub struct FeatureEnhancement {
    pub mlp_shallow: Mlp,
    pub mlp_middle: Mlp,
    pub fuse_early: ConvBnAct,
    pub mlp_early: Mlp,
    pub mlp_deep: Mlp,
    pub fuse_final: ConvBnAct,
    channels: usize,
}

impl FeatureEnhancement {
    pub fn new(channels: usize, cba_depth: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        let mlp = |name: &str, rng: &mut _| Mlp::new(&format!("featenh.{name}"), &[c, c, c], rng);
        Ok(FeatureEnhancement {
            mlp_shallow: mlp("mlp_shallow", rng)?,
            mlp_middle: mlp("mlp_middle", rng)?,
            fuse_early: ConvBnAct::new("featenh.cba_early", 2 * c, c, cba_depth, rng)?,
            mlp_early: mlp("mlp_early", rng)?,
            mlp_deep: mlp("mlp_deep", rng)?,
            fuse_final: ConvBnAct::new("featenh.cba_final", 2 * c, c, cba_depth, rng)?,
            channels,
        })
    }

    /// Enhanced visual features flattened row-major over `(h, w)` to
    /// `(H·W)×C`.
    pub fn forward(&self, f_v1: &Tensor, f_v2: &Tensor, f_v3: &Tensor, training: bool) -> Result<Tensor> {
        let (h, w, c) = f_v1.dims3("enhance")?;
        for f in [f_v2, f_v3] {
            if f.shape() != f_v1.shape() {
                return Err(Error::shape(
                    "enhance",
                    format!("{:?} vs {:?}", f_v1.shape(), f.shape()),
                ));
            }
        }
        if c != self.channels {
            return Err(Error::shape("enhance", format!("{c} channels, expected {}", self.channels)));
        }
        let early = Tensor::concat_last(&[&self.mlp_shallow.forward(f_v1)?, &self.mlp_middle.forward(f_v2)?])?;
        let early = self.fuse_early.forward(&early, training)?;
        let fused = Tensor::concat_last(&[&self.mlp_early.forward(&early)?, &self.mlp_deep.forward(f_v3)?])?;
        self.fuse_final.forward(&fused, training)?.reshape(&[h * w, c])
    }
}

impl Module for FeatureEnhancement {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp_shallow.visit_params(f);
        self.mlp_middle.visit_params(f);
        self.fuse_early.visit_params(f);
        self.mlp_early.visit_params(f);
        self.mlp_deep.visit_params(f);
        self.fuse_final.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp_shallow.visit_params_mut(f);
        self.mlp_middle.visit_params_mut(f);
        self.fuse_early.visit_params_mut(f);
        self.mlp_early.visit_params_mut(f);
        self.mlp_deep.visit_params_mut(f);
        self.fuse_final.visit_params_mut(f);
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        self.fuse_early.visit_stats(f);
        self.fuse_final.visit_stats(f);
    }
}

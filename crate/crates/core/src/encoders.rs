//! Frozen stand-ins for the pretrained image and text encoders.
//!
//! The image stub is a seeded three-stage convolutional pyramid: a stride-4
//! patch embedding with an added 2-D sinusoidal position code, followed by
//! two residual 3×3 stages. The three stage outputs play the role of the
//! shallow, middle and deep visual features. The text stub is an embedding
//! table lookup; its positional encoding is returned separately.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::Dims;
use crate::dataset::{Sample, PAD};
use crate::error::{Error, Result};
use crate::nn::{normal_vec, Linear, Module, Param};
use crate::tensor::Tensor;

const PATCH: usize = 4;

/// Everything downstream modules see of an input pair.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    pub f_v1: Tensor,
    pub f_v2: Tensor,
    pub f_v3: Tensor,
    /// `L_t×C′`, padding rows included.
    pub f_l: Tensor,
    pub pos_enc: Tensor,
    /// `false` at padding positions.
    pub token_keep: Vec<bool>,
}

/// Sinusoidal code: even channels `sin(p/10000^(2i/d))`, odd channels `cos`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 / freq;
            pe[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// 2-D position code: first half of the channels encodes the row, second
/// half the column.
fn grid_encoding(h: usize, w: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let rows = sinusoidal_encoding(h, half);
    let cols = sinusoidal_encoding(w, c - half);
    let mut pe = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            pe.extend_from_slice(&rows[y * half..(y + 1) * half]);
            pe.extend_from_slice(&cols[x * (c - half)..(x + 1) * (c - half)]);
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stem: Linear,
    stage2: (Param, Param),
    stage3: (Param, Param),
    position: Tensor,
    dims: Dims,
}

impl ImageEncoder {
    fn new(dims: &Dims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = dims.c;
        let conv = |name: &str, rng: &mut ChaCha8Rng| -> Result<(Param, Param)> {
            let std = 1.0 / ((9 * c) as f64).sqrt();
            Ok((
                Param::new(format!("{name}.kernel"), &[3, 3, c, c], normal_vec(rng, 9 * c * c, std), true)?,
                Param::new(format!("{name}.bias"), &[c], vec![0.0; c], true)?,
            ))
        };
        let stem = Linear::new("stubenc.image.stem", PATCH * PATCH * 3, c, true, rng)?;
        let stage2 = conv("stubenc.image.stage2", rng)?;
        let stage3 = conv("stubenc.image.stage3", rng)?;
        let pe: Vec<f64> = grid_encoding(dims.h, dims.w, c).into_iter().map(|v| 0.5 * v).collect();
        Ok(ImageEncoder {
            stem,
            stage2,
            stage3,
            position: Tensor::new(&[dims.h, dims.w, c], pe)?,
            dims: *dims,
        })
    }

    /// Rearranges `4H×4W×3` into `H·W` rows of `4·4·3` patch values.
    fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let d = &self.dims;
        let (ih, iw) = (d.image_height(), d.image_width());
        if image.shape() != [ih, iw, 3] {
            return Err(Error::shape(
                "encode_image",
                format!("expected {ih}×{iw}×3 image, got {:?}", image.shape()),
            ));
        }
        let x = image.data();
        let k = PATCH * PATCH * 3;
        let mut out = Vec::with_capacity(d.h * d.w * k);
        for py in 0..d.h {
            for px in 0..d.w {
                for dy in 0..PATCH {
                    let row = (py * PATCH + dy) * iw + px * PATCH;
                    out.extend_from_slice(&x[row * 3..(row + PATCH) * 3]);
                }
            }
        }
        Tensor::new(&[d.h * d.w, k], out)
    }

    /// Shallow, middle and deep `H×W×C` features.
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = &self.dims;
        let stem = self.stem.forward(&self.patches(image)?)?.gelu()?;
        let f1 = stem.reshape(&[d.h, d.w, d.c])?.add(&self.position)?;
        let f2 = f1.add(&f1.conv3x3(self.stage2.0.tensor(), self.stage2.1.tensor())?.gelu()?)?;
        let f3 = f2.add(&f2.conv3x3(self.stage3.0.tensor(), self.stage3.1.tensor())?.gelu()?)?;
        Ok((f1, f2, f3))
    }
}

impl Module for ImageEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit_params(f);
        for (k, b) in [&self.stage2, &self.stage3] {
            f(k);
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        for (k, b) in [&mut self.stage2, &mut self.stage3] {
            f(k);
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Param,
    position: Tensor,
    dims: Dims,
}

impl TextEncoder {
    fn new(dims: &Dims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (v, c) = (dims.vocab, dims.c_text);
        Ok(TextEncoder {
            embedding: Param::new("stubenc.text.embedding", &[v, c], normal_vec(rng, v * c, 1.0), true)?,
            position: Tensor::new(&[dims.max_tokens, c], sinusoidal_encoding(dims.max_tokens, c))?,
            dims: *dims,
        })
    }

    /// Embeds `tokens` (padded to `L_t` with [`PAD`] if shorter). Returns the
    /// features, the positional encoding and the non-padding flags.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor, Tensor, Vec<bool>)> {
        let d = &self.dims;
        if tokens.len() > d.max_tokens {
            return Err(Error::Input(format!(
                "{} tokens exceed the maximum of {}",
                tokens.len(),
                d.max_tokens
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= d.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", d.vocab)));
        }
        let mut ids = tokens.to_vec();
        ids.resize(d.max_tokens, PAD);
        let c = d.c_text;
        let table = self.embedding.data();
        let rows: Vec<f64> = ids
            .iter()
            .flat_map(|&t| table[t * c..(t + 1) * c].iter().copied())
            .collect();
        let keep = ids.iter().map(|&t| t != PAD).collect();
        Ok((Tensor::new(&[d.max_tokens, c], rows)?, self.position.clone(), keep))
    }
}

impl Module for TextEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.embedding);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.embedding);
    }
}

/// Both frozen encoders, built from one seed.
#[derive(Debug, Clone)]
pub struct StubEncoders {
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl StubEncoders {
    pub fn new(dims: &Dims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(StubEncoders {
            image: ImageEncoder::new(dims, &mut rng)?,
            text: TextEncoder::new(dims, &mut rng)?,
        })
    }

    pub fn encode(&self, image: &Tensor, tokens: &[usize]) -> Result<EncoderBundle> {
        let (f_v1, f_v2, f_v3) = self.image.encode(image)?;
        let (f_l, pos_enc, token_keep) = self.text.encode(tokens)?;
        Ok(EncoderBundle {
            f_v1,
            f_v2,
            f_v3,
            f_l,
            pos_enc,
            token_keep,
        })
    }

    pub fn encode_sample(&self, sample: &Sample) -> Result<EncoderBundle> {
        self.encode(&sample.image, &sample.tokens)
    }

    /// SHA-256 over every parameter's name and bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            h.update(p.name().as_bytes());
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Module for StubEncoders {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.image.visit_params(f);
        self.text.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.image.visit_params_mut(f);
        self.text.visit_params_mut(f);
    }
}

//! Parameters and the small set of layers the model is assembled from.

use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

/// A named weight tensor. Trainable parameters are gradient-tracking leaves;
/// frozen ones are constants and never receive a gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    frozen: bool,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>, frozen: bool) -> Result<Self> {
        let value = if frozen {
            Tensor::new(shape, data)?
        } else {
            Tensor::variable(shape, data)?
        };
        Ok(Param {
            name: name.into(),
            frozen,
            value,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    /// Replaces the values with a fresh leaf (dropping any gradient).
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::shape(
                "set_data",
                format!("{} values for parameter {} of shape {:?}", data.len(), self.name, self.shape()),
            ));
        }
        let shape = self.shape().to_vec();
        self.value = if self.frozen {
            Tensor::new(&shape, data)?
        } else {
            Tensor::variable(&shape, data)?
        };
        Ok(())
    }
}

/// Running statistics of one batch-norm layer, addressable by name.
#[derive(Debug)]
pub struct NamedStats {
    pub name: String,
    pub stats: Mutex<RunningStats>,
}

impl Clone for NamedStats {
    fn clone(&self) -> Self {
        NamedStats {
            name: self.name.clone(),
            stats: Mutex::new(self.stats.lock().expect("stats lock").clone()),
        }
    }
}

/// Anything owning parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn visit_stats(&self, _f: &mut dyn FnMut(&NamedStats)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.data().len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(p.name().to_string()));
        v
    }
}

pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `y = x·W + b` over the last dimension; `W` is `in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, frozen: bool, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (input as f64).sqrt();
        Ok(Linear {
            weight: Param::new(
                format!("{name}.weight"),
                &[input, output],
                normal_vec(rng, input * output, std),
                frozen,
            )?,
            bias: Param::new(format!("{name}.bias"), &[output], vec![0.0; output], frozen)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Accepts any tensor whose last dimension is `in`; leading dimensions
    /// are preserved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().expect("rank ≥ 1");
        let rows = x.numel() / c;
        let flat = if x.rank() == 2 { x.clone() } else { x.reshape(&[rows, c])? };
        let y = flat.matmul(self.weight.tensor())?.add_row(self.bias.tensor())?;
        if x.rank() == 2 {
            Ok(y)
        } else {
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = self.out_features();
            y.reshape(&shape)
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Affine layers with GeLU between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(name: &str, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp {name} needs at least one layer")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], false, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.gelu()?;
            }
            h = l.forward(&h)?;
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: Param::new(format!("{name}.gain"), &[dim], vec![1.0; dim], false)?,
            bias: Param::new(format!("{name}.bias"), &[dim], vec![0.0; dim], false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gain.tensor(), self.bias.tensor())
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Batch norm over `h×w×c` maps. Running statistics live behind a mutex so
/// a shared model can run training-mode forwards.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gain: Param,
    pub bias: Param,
    pub stats: NamedStats,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gain: Param::new(format!("{name}.gain"), &[channels], vec![1.0; channels], false)?,
            bias: Param::new(format!("{name}.bias"), &[channels], vec![0.0; channels], false)?,
            stats: NamedStats {
                name: name.to_string(),
                stats: Mutex::new(RunningStats::new(channels)),
            },
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut st = self.stats.stats.lock().expect("stats lock");
        x.batch_norm(self.gain.tensor(), self.bias.tensor(), &mut st, training)
    }
}

impl Module for BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
    fn visit_stats(&self, f: &mut dyn FnMut(&NamedStats)) {
        f(&self.stats);
    }
}

/// Multi-head scaled dot-product attention with query/key/value/output
/// projections. Each head uses `Softmax(QKᵀ/√d_k)V` with `d_k = c / heads`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&format!("{name}.q"), dim, dim, false, rng)?,
            k: Linear::new(&format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::new(&format!("{name}.v"), dim, dim, false, rng)?,
            out: Linear::new(&format!("{name}.out"), dim, dim, false, rng)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Self-attention over the rows of `x`.
    pub fn self_attend(&self, x: &Tensor, key_keep: Option<&[bool]>) -> Result<Tensor> {
        self.attend(x, x, x, key_keep)
    }

    /// Cross-attention: rows of `query` attend over rows of `key`/`value`.
    /// `key_keep[j] == false` removes key row `j` from every softmax.
    pub fn attend(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_keep: Option<&[bool]>,
    ) -> Result<Tensor> {
        let (m, c) = query.dims2("attention")?;
        let (n, ck) = key.dims2("attention")?;
        let (nv, cv) = value.dims2("attention")?;
        if ck != c || cv != c || nv != n {
            return Err(Error::shape(
                "attention",
                format!("query {m}×{c}, key {n}×{ck}, value {nv}×{cv}"),
            ));
        }
        if let Some(k) = key_keep {
            if k.len() != n {
                return Err(Error::shape("attention", format!("{} key flags for {n} keys", k.len())));
            }
        }
        let keep: Vec<bool> = match key_keep {
            Some(k) => (0..m).flat_map(|_| k.iter().copied()).collect(),
            None => vec![true; m * n],
        };
        let q = self.q.forward(query)?;
        let k = self.k.forward(key)?;
        let v = self.v.forward(value)?;
        let dk = c / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = k.slice_cols(h * dk, dk)?;
            let vh = v.slice_cols(h * dk, dk)?;
            let a = qh.matmul_nt(&kh)?.scale(scale)?.softmax_rows_masked(&keep)?;
            outs.push(a.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let merged = if refs.len() == 1 {
            outs[0].clone()
        } else {
            Tensor::concat_last(&refs)?
        };
        self.out.forward(&merged)
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.out] {
            l.visit_params_mut(f);
        }
    }
}

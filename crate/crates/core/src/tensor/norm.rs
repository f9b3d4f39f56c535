use super::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics used by batch normalization in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// While present, updates are pooled here instead of the moving average.
    pub calibration: Option<Calibration>,
}

/// Sums of per-sample statistics for an exact population estimate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calibration {
    pub samples: usize,
    sum_mean: Vec<f64>,
    sum_var: Vec<f64>,
    sum_mean_sq: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            calibration: None,
        }
    }

    /// Starts pooling per-sample statistics.
    pub fn begin_calibration(&mut self) {
        let c = self.mean.len();
        self.calibration = Some(Calibration {
            samples: 0,
            sum_mean: vec![0.0; c],
            sum_var: vec![0.0; c],
            sum_mean_sq: vec![0.0; c],
        });
    }

    /// Replaces the running statistics with the pooled mean and variance of
    /// all positions seen since [`begin_calibration`](Self::begin_calibration).
    /// Samples are weighted equally, so every sample must have the same
    /// number of positions. Returns the number of samples pooled.
    pub fn finish_calibration(&mut self) -> usize {
        let Some(cal) = self.calibration.take() else { return 0 };
        if cal.samples == 0 {
            return 0;
        }
        let n = cal.samples as f64;
        for ch in 0..self.mean.len() {
            let m = cal.sum_mean[ch] / n;
            self.mean[ch] = m;
            self.var[ch] = cal.sum_var[ch] / n + (cal.sum_mean_sq[ch] / n - m * m).max(0.0);
        }
        cal.samples
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        if let Some(cal) = &mut self.calibration {
            cal.samples += 1;
            for (ch, (&m, &v)) in batch_mean.iter().zip(batch_var).enumerate() {
                cal.sum_mean[ch] += m;
                cal.sum_var[ch] += v;
                cal.sum_mean_sq[ch] += m * m;
            }
            return;
        }
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Normalizes each of `groups` groups of `n` values (strided by `stride`,
/// offset by group index) to zero mean and unit variance, then applies the
/// per-group affine. Shared by layer norm (groups = rows) and batch norm
/// (groups = channels).
struct Standardized {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn standardize(x: &[f64], groups: usize, n: usize, index: impl Fn(usize, usize) -> usize) -> Standardized {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    let mut means = vec![0.0; groups];
    let mut vars = vec![0.0; groups];
    for gi in 0..groups {
        let mean = (0..n).map(|j| x[index(gi, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|j| (x[index(gi, j)] - mean).powi(2)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for j in 0..n {
            let i = index(gi, j);
            xhat[i] = (x[i] - mean) * is;
        }
        inv_std[gi] = is;
        means[gi] = mean;
        vars[gi] = var;
    }
    Standardized {
        xhat,
        inv_std,
        mean: means,
        var: vars,
    }
}

/// Backward of `y = xhat·gain + bias` through the standardization of one group.
fn standardize_backward(
    g: &[f64],
    s: &Standardized,
    gain: &[f64],
    groups: usize,
    n: usize,
    index: impl Fn(usize, usize) -> usize,
    gain_of: impl Fn(usize, usize) -> usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    for gi in 0..groups {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..n {
            let i = index(gi, j);
            let d = g[i] * gain[gain_of(gi, j)];
            mean_d += d;
            mean_dx += d * s.xhat[i];
        }
        mean_d /= n as f64;
        mean_dx /= n as f64;
        for j in 0..n {
            let i = index(gi, j);
            let d = g[i] * gain[gain_of(gi, j)];
            dx[i] = s.inv_std[gi] * (d - mean_d - s.xhat[i] * mean_dx);
        }
    }
    dx
}

impl Tensor {
    /// Layer normalization over the last dimension with learnable gain and
    /// bias. Variance is the biased estimate; `1e-5` is added under the root.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().expect("rank ≥ 1");
        if c < 2 {
            return Err(Error::shape("layer_norm", "need at least two features"));
        }
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?}, bias {:?} for {c} features", gain.shape(), bias.shape()),
            ));
        }
        let rows = self.numel() / c;
        let s = standardize(self.data(), rows, c, |r, j| r * c + j);
        let out = s
            .xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gain.data()[i % c] + bias.data()[i % c])
            .collect();
        let (x_, g_, b_) = (self.clone(), gain.clone(), bias.clone());
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gx = x_.requires_grad().then(|| {
                    standardize_backward(g, &s, g_.data(), rows, c, |r, j| r * c + j, |_, j| j)
                });
                let gg = g_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv * s.xhat[i];
                    }
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                    d
                });
                vec![gx, gg, gb]
            }),
        )
    }

    /// Batch normalization of an `h×w×c` map with batch-of-one semantics:
    /// statistics are taken per channel over the spatial positions.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `stats` (momentum 0.1, biased variance). In eval mode the
    /// running statistics are used and `stats` is left untouched.
    pub fn batch_norm(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Tensor> {
        let (h, w, c) = self.dims3("batch_norm")?;
        if gain.shape() != [c] || bias.shape() != [c] || stats.mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine/statistics size mismatch for {c} channels"),
            ));
        }
        let n = h * w;
        if !training {
            let scale: Vec<f64> = (0..c)
                .map(|ch| gain.data()[ch] / (stats.var[ch] + NORM_EPS).sqrt())
                .collect();
            let shift: Vec<f64> = (0..c)
                .map(|ch| bias.data()[ch] - stats.mean[ch] * scale[ch])
                .collect();
            return self.channel_affine(gain, bias, &scale, &shift, &stats.mean, &stats.var);
        }

        let s = standardize(self.data(), c, n, |ch, p| p * c + ch);
        stats.update(&s.mean, &s.var);
        let out = s
            .xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gain.data()[i % c] + bias.data()[i % c])
            .collect();
        let (x_, g_, b_) = (self.clone(), gain.clone(), bias.clone());
        Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gx = x_.requires_grad().then(|| {
                    standardize_backward(g, &s, g_.data(), c, n, |ch, p| p * c + ch, |ch, _| ch)
                });
                let gg = g_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv * s.xhat[i];
                    }
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                    d
                });
                vec![gx, gg, gb]
            }),
        )
    }

    /// Eval-mode batch norm: `y = x·scale + shift` per channel, with
    /// gradients for the input and the affine parameters.
    fn channel_affine(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        scale: &[f64],
        shift: &[f64],
        mean: &[f64],
        var: &[f64],
    ) -> Result<Tensor> {
        let c = scale.len();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * scale[i % c] + shift[i % c])
            .collect();
        let scale = scale.to_vec();
        let xhat_of: Vec<(f64, f64)> = mean
            .iter()
            .zip(var)
            .map(|(m, v)| (*m, 1.0 / (v + NORM_EPS).sqrt()))
            .collect();
        let (x_, g_, b_) = (self.clone(), gain.clone(), bias.clone());
        Tensor::from_op(
            "batch_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gx = x_
                    .requires_grad()
                    .then(|| g.iter().enumerate().map(|(i, gv)| gv * scale[i % c]).collect());
                let gg = g_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, (gv, xv)) in g.iter().zip(x_.data()).enumerate() {
                        let (m, is) = xhat_of[i % c];
                        d[i % c] += gv * (xv - m) * is;
                    }
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                    d
                });
                vec![gx, gg, gb]
            }),
        )
    }
}

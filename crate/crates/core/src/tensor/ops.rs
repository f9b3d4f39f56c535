use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Last dimension and the product of the leading ones.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let c = *t.shape().last().expect("rank ≥ 1");
    (t.numel() / c, c)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl Tensor {
    /// `self[m×k] · b[k×n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, b.data(), false, &mut out, 0.0);
        let (a_, b_) = (self.clone(), b.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g, _| {
                let ga = a_.requires_grad().then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b_.data(), true, &mut d, 0.0);
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a_.data(), true, g, false, &mut d, 0.0);
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = b.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{m}×{k} · ({n}×{k2})ᵀ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, b.data(), true, &mut out, 0.0);
        let (a_, b_) = (self.clone(), b.clone());
        Tensor::from_op(
            "matmul_nt",
            vec![m, n],
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g, _| {
                let ga = a_.requires_grad().then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b_.data(), false, &mut d, 0.0);
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g, true, a_.data(), false, &mut d, 0.0);
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    /// `self[k×m]ᵀ · b[k×n]`.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = b.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_tn",
                format!("({k}×{m})ᵀ · {k2}×{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), true, b.data(), false, &mut out, 0.0);
        let (a_, b_) = (self.clone(), b.clone());
        Tensor::from_op(
            "matmul_tn",
            vec![m, n],
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g, _| {
                // out = aᵀb: da = b·gᵀ (k×m), db = a·g (k×n)
                let ga = a_.requires_grad().then(|| {
                    let mut d = vec![0.0; k * m];
                    gemm(k, n, m, b_.data(), false, g, true, &mut d, 0.0);
                    d
                });
                let gb = b_.requires_grad().then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a_.data(), false, g, false, &mut d, 0.0);
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        same_shape("add", self, b)?;
        let out = self.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, b)?;
        let out = self.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, b)?;
        let out = self.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (a_, b_) = (self.clone(), b.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g, _| {
                let ga = a_
                    .requires_grad()
                    .then(|| g.iter().zip(b_.data()).map(|(g, y)| g * y).collect());
                let gb = b_
                    .requires_grad()
                    .then(|| g.iter().zip(a_.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Adds `bias[c]` to every row of a tensor whose last dimension is `c`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, c) = rows_cols(self);
        if bias.shape() != [c] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for last dimension {c}", bias.shape()),
            ));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                debug_assert_eq!(g.len(), rows * c);
                vec![Some(g.to_vec()), Some(gb)]
            }),
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = &first.shape()[..first.rank() - 1];
        let rows = first.numel() / first.shape()[first.rank() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
            widths.push(*p.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let widths_ = widths.clone();
        Tensor::from_op(
            "concat_last",
            shape,
            out,
            parts.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<f64>> =
                    widths_.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (gd, &w) in grads.iter_mut().zip(&widths_) {
                        gd.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Concatenates matrices along rows; column counts must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c2) = p.dims2("concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", format!("{c} vs {c2} columns")));
            }
            rows.push(r);
        }
        let out: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let total: usize = rows.iter().sum();
        Tensor::from_op(
            "concat_rows",
            vec![total, c],
            out,
            parts.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |g, _| {
                let mut off = 0;
                rows.iter()
                    .map(|r| {
                        let s = g[off..off + r * c].to_vec();
                        off += r * c;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Tensor::from_op(
            "slice_rows",
            vec![len, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                d[start * c..(start + len) * c].copy_from_slice(g);
                vec![Some(d)]
            }),
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Tensor::from_op(
            "slice_cols",
            vec![r, len],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(d)]
            }),
        )
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        let x_ = self.clone();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x_.data())
                        .map(|(g, &x)| g * gelu_derivative(x))
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g, y| vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]),
        )
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let keep = vec![true; self.numel()];
        self.softmax_rows_masked(&keep)
    }

    /// Row-wise softmax restricted to entries with `keep` set; the others are
    /// exactly zero, as if an additive `-∞` had been applied before the
    /// softmax. A row with no kept entry is a contract violation.
    pub fn softmax_rows_masked(&self, keep: &[bool]) -> Result<Tensor> {
        let (rows, c) = rows_cols(self);
        if keep.len() != self.numel() {
            return Err(Error::shape(
                "softmax_rows",
                format!("mask of {} entries for {} values", keep.len(), self.numel()),
            ));
        }
        let x = self.data();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let xs = &x[r * c..(r + 1) * c];
            let ks = &keep[r * c..(r + 1) * c];
            let max = xs
                .iter()
                .zip(ks)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} is fully masked")));
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if ks[j] {
                    o[j] = (xs[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(d)]
            }),
        )
    }
}

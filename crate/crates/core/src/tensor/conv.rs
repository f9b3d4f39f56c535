//! Spatial operators on `h×w×c` feature maps.

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Rows are output pixels, columns are `(ky, kx, ci)` taps of the 3×3 window,
/// zero-padded by one pixel on each side.
fn im2col3x3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im3x3(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    x[dst..dst + c]
                        .iter_mut()
                        .zip(&row[src..src + c])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    x
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks(cols) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

impl Tensor {
    /// 3×3 convolution, stride 1, zero padding 1. Kernel layout is
    /// `[3, 3, cin, cout]`.
    pub fn conv3x3(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (h, w, cin) = self.dims3("conv3x3")?;
        let cout = match kernel.shape() {
            [3, 3, ci, co] if *ci == cin => *co,
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("kernel {s:?} for {cin} input channels"),
                ))
            }
        };
        if bias.shape() != [cout] {
            return Err(Error::shape("conv3x3", format!("bias {:?}", bias.shape())));
        }
        let hw = h * w;
        let k = 9 * cin;
        let cols = im2col3x3(self.data(), h, w, cin);
        let mut out = Vec::with_capacity(hw * cout);
        for _ in 0..hw {
            out.extend_from_slice(bias.data());
        }
        gemm(hw, k, cout, &cols, false, kernel.data(), false, &mut out, 1.0);

        let (x_, k_, b_) = (self.clone(), kernel.clone(), bias.clone());
        Tensor::from_op(
            "conv3x3",
            vec![h, w, cout],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gx = x_.requires_grad().then(|| {
                    let mut dcols = vec![0.0; hw * k];
                    gemm(hw, cout, k, g, false, k_.data(), true, &mut dcols, 0.0);
                    col2im3x3(&dcols, h, w, cin)
                });
                let gk = k_.requires_grad().then(|| {
                    let mut dk = vec![0.0; k * cout];
                    gemm(k, hw, cout, &cols, true, g, false, &mut dk, 0.0);
                    dk
                });
                let gb = b_.requires_grad().then(|| column_sums(g, cout));
                vec![gx, gk, gb]
            }),
        )
    }

    /// 2×2 transposed convolution with stride 2: every input pixel writes its
    /// own disjoint 2×2 output block, so `h×w` becomes exactly `2h×2w`.
    /// Kernel layout is `[cin, 2, 2, cout]`.
    pub fn transposed_conv2x(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (h, w, cin) = self.dims3("transposed_conv2x")?;
        let cout = match kernel.shape() {
            [ci, 2, 2, co] if *ci == cin => *co,
            s => {
                return Err(Error::shape(
                    "transposed_conv2x",
                    format!("kernel {s:?} for {cin} input channels"),
                ))
            }
        };
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "transposed_conv2x",
                format!("bias {:?}", bias.shape()),
            ));
        }
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut blocks = vec![0.0; hw * 4 * cout];
        gemm(hw, cin, 4 * cout, self.data(), false, kernel.data(), false, &mut blocks, 0.0);
        let mut out = vec![0.0; oh * ow * cout];
        for y in 0..h {
            for x in 0..w {
                let src = &blocks[(y * w + x) * 4 * cout..];
                for ky in 0..2 {
                    for kx in 0..2 {
                        let o = ((2 * y + ky) * ow + 2 * x + kx) * cout;
                        let s = (ky * 2 + kx) * cout;
                        for co in 0..cout {
                            out[o + co] = src[s + co] + bias.data()[co];
                        }
                    }
                }
            }
        }

        let (x_, k_, b_) = (self.clone(), kernel.clone(), bias.clone());
        Tensor::from_op(
            "transposed_conv2x",
            vec![oh, ow, cout],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g, _| {
                let mut gblocks = vec![0.0; hw * 4 * cout];
                for y in 0..h {
                    for x in 0..w {
                        let dst = (y * w + x) * 4 * cout;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let o = ((2 * y + ky) * ow + 2 * x + kx) * cout;
                                let s = dst + (ky * 2 + kx) * cout;
                                gblocks[s..s + cout].copy_from_slice(&g[o..o + cout]);
                            }
                        }
                    }
                }
                let gx = x_.requires_grad().then(|| {
                    let mut d = vec![0.0; hw * cin];
                    gemm(hw, 4 * cout, cin, &gblocks, false, k_.data(), true, &mut d, 0.0);
                    d
                });
                let gk = k_.requires_grad().then(|| {
                    let mut d = vec![0.0; cin * 4 * cout];
                    gemm(cin, hw, 4 * cout, x_.data(), true, &gblocks, false, &mut d, 0.0);
                    d
                });
                let gb = b_.requires_grad().then(|| column_sums(g, cout));
                vec![gx, gk, gb]
            }),
        )
    }
}

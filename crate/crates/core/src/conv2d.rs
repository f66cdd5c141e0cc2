//! Same-padded 2D cross-correlation via im2col + GEMM.
//!
//! The im2col helpers carry an extra trailing "inner" axis so the 4D
//! convolutions can reuse them: a `[C, H, W, P]` block is convolved over
//! `(H, W)` with the `P` axis riding along untouched.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{cfg_err, dim_err, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

pub(crate) fn out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Geometry of one im2col pass over the `(h, w)` axes of a `[c, h, w, inner]`
/// block. Kernel taps that never land inside the input are dropped from the
/// patch matrix, which matters for the 1×1 context planes of squeezed volumes.
#[derive(Debug, Clone)]
pub(crate) struct Patch {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub inner: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    taps: Vec<(usize, usize)>,
}

fn tap_reaches(n: usize, k: usize, s: usize, t: usize) -> bool {
    let p = k / 2;
    (0..out_len(n, s)).any(|o| {
        let i = (o * s + t) as isize - p as isize;
        i >= 0 && i < n as isize
    })
}

impl Patch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(c: usize, h: usize, w: usize, inner: usize, kh: usize, kw: usize, sh: usize, sw: usize) -> Self {
        let mut taps = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            if !tap_reaches(h, kh, sh, ky) {
                continue;
            }
            for kx in 0..kw {
                if tap_reaches(w, kw, sw, kx) {
                    taps.push((ky, kx));
                }
            }
        }
        Self { c, h, w, inner, kh, kw, sh, sw, taps }
    }

    pub fn oh(&self) -> usize {
        out_len(self.h, self.sh)
    }
    pub fn ow(&self) -> usize {
        out_len(self.w, self.sw)
    }
    pub fn rows(&self) -> usize {
        self.c * self.taps.len()
    }
    pub fn cols(&self) -> usize {
        self.oh() * self.ow() * self.inner
    }
    fn dense(&self) -> bool {
        self.taps.len() == self.kh * self.kw
    }

    /// Weights `[out, c, kh, kw]` restricted to the live taps, as `[out, rows]`.
    pub fn gather_weight<'a>(&self, weight: &'a [f64], out: usize) -> Cow<'a, [f64]> {
        if self.dense() {
            return Cow::Borrowed(&weight[..out * self.c * self.kh * self.kw]);
        }
        let mut g = Vec::with_capacity(out * self.rows());
        for o in 0..out {
            for ci in 0..self.c {
                for &(ky, kx) in &self.taps {
                    g.push(weight[((o * self.c + ci) * self.kh + ky) * self.kw + kx]);
                }
            }
        }
        Cow::Owned(g)
    }

    /// Adds a `[out, rows]` gradient back into the full `[out, c, kh, kw]` layout.
    pub fn scatter_weight_grad(&self, gathered: &[f64], grad: &mut [f64], out: usize) {
        let mut it = gathered.iter();
        for o in 0..out {
            for ci in 0..self.c {
                for &(ky, kx) in &self.taps {
                    grad[((o * self.c + ci) * self.kh + ky) * self.kw + kx] += it.next().unwrap();
                }
            }
        }
    }

    /// Writes the patch matrix into `cols` (row-major, `row_stride` columns per
    /// row, starting at column `col_offset`). Out-of-bounds taps stay zero.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64], row_stride: usize, col_offset: usize) {
        let (oh, ow, p) = (self.oh(), self.ow(), self.inner);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let nt = self.taps.len();
        for ci in 0..self.c {
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = ci * nt + t;
                let dst = &mut cols[row * row_stride + col_offset..][..oh * ow * p];
                for oy in 0..oh {
                    let iy = (oy * self.sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * self.sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = ((ci * self.h + iy as usize) * self.w + ix as usize) * p;
                        dst[(oy * ow + ox) * p..][..p].copy_from_slice(&input[src..src + p]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: accumulates columns back into `grad_in`.
    pub fn col2im(&self, cols: &[f64], grad_in: &mut [f64], row_stride: usize, col_offset: usize) {
        let (oh, ow, p) = (self.oh(), self.ow(), self.inner);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let nt = self.taps.len();
        for ci in 0..self.c {
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = ci * nt + t;
                let src = &cols[row * row_stride + col_offset..][..oh * ow * p];
                for oy in 0..oh {
                    let iy = (oy * self.sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * self.sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = ((ci * self.h + iy as usize) * self.w + ix as usize) * p;
                        for (d, s) in grad_in[dst..dst + p].iter_mut().zip(&src[(oy * ow + ox) * p..]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// `out[o, :] += W[o, :] · cols` over the live taps.
    pub fn apply(&self, weight: &[f64], out_ch: usize, cols: &[f64], ncols: usize, out: &mut [f64]) {
        let w = self.gather_weight(weight, out_ch);
        gemm(out_ch, self.rows(), ncols, 1.0, &w, false, cols, false, 1.0, out);
    }

    /// Weight gradient `g · colsᵀ` accumulated into the full weight layout.
    pub fn weight_grad(&self, g: &[f64], out_ch: usize, cols: &[f64], ncols: usize, grad_weight: &mut [f64]) {
        if self.dense() {
            gemm(out_ch, ncols, self.rows(), 1.0, g, false, cols, true, 1.0, grad_weight);
        } else {
            let mut gw = vec![0.0; out_ch * self.rows()];
            gemm(out_ch, ncols, self.rows(), 1.0, g, false, cols, true, 0.0, &mut gw);
            self.scatter_weight_grad(&gw, grad_weight, out_ch);
        }
    }

    /// Column gradient `Wᵀ · g`.
    pub fn cols_grad(&self, weight: &[f64], out_ch: usize, g: &[f64], ncols: usize) -> Vec<f64> {
        let w = self.gather_weight(weight, out_ch);
        let mut gcols = vec![0.0; self.rows() * ncols];
        gemm(self.rows(), out_ch, ncols, 1.0, &w, true, g, false, 0.0, &mut gcols);
        gcols
    }
}

/// A same-padded 2D convolution layer description. Weights are laid out
/// `[out, in, k, k]`, followed by an optional bias of length `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(cfg_err!("conv kernel extent must be odd, got {kernel}"));
        }
        if stride == 0 {
            return Err(cfg_err!("conv stride must be positive"));
        }
        Ok(Self { in_channels, out_channels, kernel, stride })
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn patch(&self, h: usize, w: usize) -> Patch {
        Patch::new(self.in_channels, h, w, 1, self.kernel, self.kernel, self.stride, self.stride)
    }

    pub fn forward(&self, input: &Tensor, weight: &[f64], bias: Option<&[f64]>) -> Result<(Tensor, Conv2dCache)> {
        let &[c, h, w] = input.shape() else {
            return Err(dim_err!("conv2d expects [C,H,W], got {:?}", input.shape()));
        };
        if c != self.in_channels {
            return Err(dim_err!("conv2d expects {} channels, got {c}", self.in_channels));
        }
        let patch = self.patch(h, w);
        let (rows, ncols) = (patch.rows(), patch.cols());
        let mut cols = vec![0.0; rows * ncols];
        patch.im2col(input.data(), &mut cols, ncols, 0);
        let mut out = Tensor::zeros(&[self.out_channels, patch.oh(), patch.ow()]);
        if let Some(b) = bias {
            for (o, chunk) in out.data_mut().chunks_exact_mut(ncols).enumerate() {
                chunk.fill(b[o]);
            }
        }
        patch.apply(weight, self.out_channels, &cols, ncols, out.data_mut());
        Ok((out, Conv2dCache { cols, in_h: h, in_w: w }))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        cache: &Conv2dCache,
        grad_out: &Tensor,
        weight: &[f64],
        grad_weight: &mut [f64],
        grad_bias: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let patch = self.patch(cache.in_h, cache.in_w);
        let (_, ncols) = (patch.rows(), patch.cols());
        let g = grad_out.data();
        patch.weight_grad(g, self.out_channels, &cache.cols, ncols, grad_weight);
        if let Some(gb) = grad_bias {
            for (o, chunk) in g.chunks_exact(ncols).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let gcols = patch.cols_grad(weight, self.out_channels, g, ncols);
        let mut gin = Tensor::zeros(&[self.in_channels, cache.in_h, cache.in_w]);
        patch.col2im(&gcols, gin.data_mut(), ncols, 0);
        Some(gin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, weight: &[f64], bias: &[f64], conv: &Conv2d) -> Tensor {
        let &[c, h, w] = input.shape() else { unreachable!() };
        let k = conv.kernel;
        let p = (k / 2) as isize;
        let (oh, ow) = (out_len(h, conv.stride), out_len(w, conv.stride));
        let mut out = Tensor::zeros(&[conv.out_channels, oh, ow]);
        for o in 0..conv.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * conv.stride + ky) as isize - p;
                                let ix = (x * conv.stride + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * c + i) * k + ky) * k + kx]
                                    * input.data()[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * f)).collect()
    }

    #[test]
    fn matches_naive_with_stride() {
        for stride in 1..=2 {
            let conv = Conv2d::new(3, 4, 3, stride).unwrap();
            let input = Tensor::from_vec(&[3, 5, 6], seq(90, 0.31)).unwrap();
            let w = seq(conv.weight_len(), 0.17);
            let b = seq(4, 0.9);
            let (out, _) = conv.forward(&input, &w, Some(&b)).unwrap();
            assert!(out.max_abs_diff(&naive(&input, &w, &b, &conv)) < 1e-12);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Conv2d::new(1, 1, 2, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let conv = Conv2d::new(2, 3, 3, 2).unwrap();
        let input = Tensor::from_vec(&[2, 5, 4], seq(40, 0.43)).unwrap();
        let w = seq(conv.weight_len(), 0.29);
        let b = seq(3, 0.7);
        let up = Tensor::from_vec(&[3, 3, 2], seq(18, 1.3)).unwrap();
        let loss = |inp: &Tensor, w: &[f64]| -> f64 {
            let (o, _) = conv.forward(inp, w, Some(&b)).unwrap();
            o.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward(&input, &w, Some(&b)).unwrap();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gin = conv.backward(&cache, &up, &w, &mut gw, Some(&mut gb), true).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&input, &wp) - loss(&input, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7);
        }
        for i in 0..input.len() {
            let mut ip = input.clone();
            ip.data_mut()[i] += h;
            let mut im = input.clone();
            im.data_mut()[i] -= h;
            let fd = (loss(&ip, &w) - loss(&im, &w)) / (2.0 * h);
            assert!((fd - gin.data()[i]).abs() < 1e-7);
        }
        assert!((gb[0] - up.data()[..6].iter().sum::<f64>()).abs() < 1e-12);
    }
}

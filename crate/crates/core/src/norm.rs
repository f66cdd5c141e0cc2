//! Group normalization and ReLU over channel-first tensors of any rank.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{cfg_err, dim_err, Result};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization with a per-channel affine transform. Parameters are
/// stored as `gamma[channels]` followed by `beta[channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(cfg_err!("{channels} channels cannot be split into {groups} groups"));
        }
        Ok(Self { groups, channels })
    }

    pub fn param_len(&self) -> usize {
        2 * self.channels
    }

    /// Identity affine transform: `gamma = 1`, `beta = 0`.
    pub fn init_params(&self) -> Vec<f64> {
        let mut p = vec![1.0; self.channels];
        p.resize(2 * self.channels, 0.0);
        p
    }

    pub fn forward(&self, input: &Tensor, params: &[f64]) -> Result<(Tensor, GroupNormCache)> {
        if input.channels() != self.channels {
            return Err(dim_err!("group norm expects {} channels, got {}", self.channels, input.channels()));
        }
        let (gamma, beta) = params.split_at(self.channels);
        let s = input.spatial_len();
        let per_group = self.channels / self.groups * s;
        let mut normalized = vec![0.0; input.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (x, xn) in input.data().chunks_exact(per_group).zip(normalized.chunks_exact_mut(per_group)) {
            let n = per_group as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
            for (o, v) in xn.iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = Tensor::zeros(input.shape());
        for (c, (o, xn)) in out.data_mut().chunks_exact_mut(s).zip(normalized.chunks_exact(s)).enumerate() {
            for (o, v) in o.iter_mut().zip(xn) {
                *o = v * gamma[c] + beta[c];
            }
        }
        Ok((out, GroupNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &GroupNormCache, grad_out: &Tensor, params: &[f64], grads: &mut [f64]) -> Tensor {
        let gamma = &params[..self.channels];
        let (ggamma, gbeta) = grads.split_at_mut(self.channels);
        let s = grad_out.spatial_len();
        let cpg = self.channels / self.groups;
        let g = grad_out.data();
        let xn = &cache.normalized;
        let mut gin = Tensor::zeros(grad_out.shape());
        // dy/dx̂ = gamma; collect per-channel affine grads on the way.
        let mut gxn = vec![0.0; g.len()];
        for c in 0..self.channels {
            let range = c * s..(c + 1) * s;
            let (gc, xc) = (&g[range.clone()], &xn[range.clone()]);
            ggamma[c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
            gbeta[c] += gc.iter().sum::<f64>();
            for (d, v) in gxn[range].iter_mut().zip(gc) {
                *d = v * gamma[c];
            }
        }
        let per_group = cpg * s;
        let n = per_group as f64;
        for (gi, ((dst, gx), x)) in gin
            .data_mut()
            .chunks_exact_mut(per_group)
            .zip(gxn.chunks_exact(per_group))
            .zip(xn.chunks_exact(per_group))
            .enumerate()
        {
            let mean_g = gx.iter().sum::<f64>() / n;
            let mean_gx = gx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / n;
            let is = cache.inv_std[gi];
            for ((d, a), b) in dst.iter_mut().zip(gx).zip(x) {
                *d = is * (a - mean_g - b * mean_gx);
            }
        }
        gin
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.map_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, o) in grad.data_mut().iter_mut().zip(output.data()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

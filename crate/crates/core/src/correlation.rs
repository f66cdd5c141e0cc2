//! Heatmap-masked features and the cosine hypercorrelation pyramid.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::FeaturePyramid;
use crate::error::{dim_err, Result};
use crate::heatmap::SaliencyHeatmap;
use crate::interp::resize_plane;
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Channel vectors shorter than this are treated as zero.
pub const ZERO_NORM: f64 = 1e-8;

/// Per-level volumes `[layers, A, B, D, E]`, fine to coarse. `(A, B)` are
/// context positions and `(D, E)` target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HypercorrelationPyramid {
    pub levels: Vec<Tensor>,
}

/// Multiplies every layer by the heatmap resized bilinearly to its size.
pub fn mask_features(pyramid: &FeaturePyramid, heatmap: &SaliencyHeatmap) -> FeaturePyramid {
    let layers = pyramid
        .layers
        .iter()
        .map(|l| {
            let (c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
            let m = resize_plane(heatmap.data(), heatmap.height(), heatmap.width(), h, w);
            let mut out = l.clone();
            for ch in out.data_mut().chunks_exact_mut(h * w).take(c) {
                for (v, s) in ch.iter_mut().zip(&m) {
                    *v *= s;
                }
            }
            out
        })
        .collect();
    FeaturePyramid { layers }
}

/// `[hw, C]` matrix of unit channel vectors; zero rows stay zero.
fn unit_rows(layer: &Tensor) -> Vec<f64> {
    let (c, hw) = (layer.shape()[0], layer.spatial_len());
    let d = layer.data();
    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        let norm = libm::sqrt((0..c).map(|k| d[k * hw + p] * d[k * hw + p]).sum::<f64>());
        if norm < ZERO_NORM {
            continue;
        }
        for k in 0..c {
            out[p * c + k] = d[k * hw + p] / norm;
        }
    }
    out
}

/// ReLU of the cosine similarity between every context position and every
/// target position of one layer, as a `[hc·wc, ht·wt]` matrix.
pub fn cosine_correlation(context: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let c = context.shape()[0];
    if target.shape()[0] != c {
        return Err(dim_err!("context has {c} channels, target {}", target.shape()[0]));
    }
    let (nc, nt) = (context.spatial_len(), target.spatial_len());
    let (uc, ut) = (unit_rows(context), unit_rows(target));
    let mut out = vec![0.0; nc * nt];
    gemm(nc, c, nt, 1.0, &uc, false, &ut, true, 0.0, &mut out);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Correlates level-aligned pyramids and stacks layers of equal spatial size
/// as channels.
pub fn build_hypercorrelation(context: &FeaturePyramid, target: &FeaturePyramid) -> Result<HypercorrelationPyramid> {
    if context.sizes() != target.sizes() {
        return Err(dim_err!("context and target pyramids are not level-aligned"));
    }
    let mut levels = Vec::new();
    for group in context.groups() {
        let (hc, wc) = context.sizes()[group[0]];
        let (ht, wt) = target.sizes()[group[0]];
        let mut data = Vec::with_capacity(group.len() * hc * wc * ht * wt);
        for &i in &group {
            data.extend(cosine_correlation(&context.layers[i], &target.layers[i])?);
        }
        levels.push(Tensor::from_vec(&[group.len(), hc, wc, ht, wt], data)?);
    }
    Ok(HypercorrelationPyramid { levels })
}

/// Masks the context pyramid with its heatmap and correlates it with the
/// target pyramid.
pub fn mask_and_correlate(
    context: &FeaturePyramid,
    context_heatmap: &SaliencyHeatmap,
    target: &FeaturePyramid,
) -> Result<HypercorrelationPyramid> {
    build_hypercorrelation(&mask_features(context, context_heatmap), target)
}

//! Separable linear interpolation with half-pixel centers
//! (`align_corners = false`): output sample `j` reads source coordinate
//! `(j + 0.5)·in/out − 0.5`, clamped to the valid range.
//!
//! Every bilinear resize in the crate (heatmap masks, pyramid mixing, decoder
//! upsampling) goes through this module so that one convention holds
//! everywhere.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Source taps `(i0, i1, lambda)` for every output sample.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Resizes `input` along `axis` to `new_len` samples.
pub fn resize_axis(input: &Tensor, axis: usize, new_len: usize) -> Tensor {
    let (outer, len, inner) = split(input.shape(), axis);
    if len == new_len {
        return input.clone();
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = new_len;
    let mut out = Tensor::zeros(&shape);
    let taps = linear_taps(len, new_len);
    let src = input.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for (j, &(i0, i1, l)) in taps.iter().enumerate() {
            let d = &mut dst[(o * new_len + j) * inner..][..inner];
            let a = &src[(o * len + i0) * inner..][..inner];
            let b = &src[(o * len + i1) * inner..][..inner];
            for ((d, a), b) in d.iter_mut().zip(a).zip(b) {
                *d = (1.0 - l) * a + l * b;
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`]: maps an output gradient back to `old_len`.
pub fn resize_axis_backward(grad: &Tensor, axis: usize, old_len: usize) -> Tensor {
    let (outer, len, inner) = split(grad.shape(), axis);
    if len == old_len {
        return grad.clone();
    }
    let mut shape = grad.shape().to_vec();
    shape[axis] = old_len;
    let mut out = Tensor::zeros(&shape);
    let taps = linear_taps(old_len, len);
    let g = grad.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for (j, &(i0, i1, l)) in taps.iter().enumerate() {
            let gj = &g[(o * len + j) * inner..][..inner];
            for (t, gv) in gj.iter().enumerate() {
                dst[(o * old_len + i0) * inner + t] += (1.0 - l) * gv;
                dst[(o * old_len + i1) * inner + t] += l * gv;
            }
        }
    }
    out
}

/// Resizes the given axes to the target sizes, one axis after another.
pub fn resize_axes(input: &Tensor, axes: &[usize], sizes: &[usize]) -> Tensor {
    let mut t = input.clone();
    for (&a, &n) in axes.iter().zip(sizes) {
        if t.shape()[a] != n {
            t = resize_axis(&t, a, n);
        }
    }
    t
}

/// Adjoint of [`resize_axes`]; `old_sizes` are the input extents of `axes`.
pub fn resize_axes_backward(grad: &Tensor, axes: &[usize], old_sizes: &[usize]) -> Tensor {
    let mut g = grad.clone();
    for (&a, &n) in axes.iter().zip(old_sizes).rev() {
        if g.shape()[a] != n {
            g = resize_axis_backward(&g, a, n);
        }
    }
    g
}

/// Bilinear resize of a single `h×w` plane.
pub fn resize_plane(data: &[f64], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let t = Tensor::from_vec(&[h, w], data.to_vec()).expect("plane size");
    resize_axes(&t, &[0, 1], &[new_h, new_w]).into_vec()
}

//! Multi-channel 4D convolution over `[C, A, B, D, E]` volumes, where
//! `(A, B)` index context positions and `(D, E)` index target positions.
//!
//! Two realizations share one interface:
//!
//! * [`Conv4dKind::Dense`] is a full cross-correlation with a `k⁴` kernel.
//! * [`Conv4dKind::CenterPivot`] keeps only the two kernel planes that pass
//!   through the kernel center: a 2D kernel over the context axes (applied at
//!   every kept target position) plus a 2D kernel over the target axes (applied
//!   at every kept context position). It equals a dense convolution whose
//!   kernel is zero off those planes, at a fraction of the cost.
//!
//! Both use same-padding (`k/2`) and produce `ceil(n / stride)` samples per axis.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv2d::{out_len, Patch};
use crate::error::{cfg_err, dim_err, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Conv4dKind {
    Dense,
    #[default]
    CenterPivot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv4d {
    pub kind: Conv4dKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 4],
    pub stride: [usize; 4],
}

/// Forward-pass state needed by [`Conv4d::backward`].
#[derive(Debug, Clone)]
pub struct Conv4dCache {
    in_dims: [usize; 4],
    cols: Vec<f64>,
    cols_tgt: Vec<f64>,
}

fn dims4(t: &Tensor) -> Result<(usize, [usize; 4])> {
    match *t.shape() {
        [c, a, b, d, e] => Ok((c, [a, b, d, e])),
        ref s => Err(dim_err!("4D volume must be [C,A,B,D,E], got {:?}", s)),
    }
}

impl Conv4d {
    pub fn new(
        kind: Conv4dKind,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 4],
        stride: [usize; 4],
    ) -> Result<Self> {
        if let Some(k) = kernel.iter().find(|k| *k % 2 == 0) {
            return Err(cfg_err!("4D kernel extents must be odd, got {k}"));
        }
        if stride.contains(&0) {
            return Err(cfg_err!("4D strides must be positive"));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(cfg_err!("4D conv channel counts must be positive"));
        }
        Ok(Self { kind, in_channels, out_channels, kernel, stride })
    }

    /// Named parameter blocks in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (o, i, k) = (self.out_channels, self.in_channels, self.kernel);
        match self.kind {
            Conv4dKind::Dense => {
                vec![("weight", vec![o, i, k[0], k[1], k[2], k[3]]), ("bias", vec![o])]
            }
            Conv4dKind::CenterPivot => vec![
                ("ctx.weight", vec![o, i, k[0], k[1]]),
                ("ctx.bias", vec![o]),
                ("tgt.weight", vec![o, i, k[2], k[3]]),
                ("tgt.bias", vec![o]),
            ],
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Fan-in of each output unit, for initialization.
    pub fn fan_in(&self) -> usize {
        let k = self.kernel;
        match self.kind {
            Conv4dKind::Dense => self.in_channels * k.iter().product::<usize>(),
            Conv4dKind::CenterPivot => self.in_channels * (k[0] * k[1] + k[2] * k[3]),
        }
    }

    pub fn out_dims(&self, in_dims: [usize; 4]) -> [usize; 4] {
        core::array::from_fn(|i| out_len(in_dims[i], self.stride[i]))
    }

    fn ctx_patch(&self, dims: [usize; 4], inner: usize) -> Patch {
        let (k, s) = (self.kernel, self.stride);
        Patch::new(self.in_channels, dims[0], dims[1], inner, k[0], k[1], s[0], s[1])
    }

    fn tgt_patch(&self, dims: [usize; 4]) -> Patch {
        let (k, s) = (self.kernel, self.stride);
        Patch::new(self.in_channels, dims[2], dims[3], 1, k[2], k[3], s[2], s[3])
    }

    pub fn forward(&self, input: &Tensor, params: &[f64]) -> Result<(Tensor, Conv4dCache)> {
        let (c, dims) = dims4(input)?;
        if c != self.in_channels {
            return Err(dim_err!("conv4d expects {} channels, got {c}", self.in_channels));
        }
        if params.len() != self.param_len() {
            return Err(dim_err!("conv4d expects {} parameters, got {}", self.param_len(), params.len()));
        }
        let od = self.out_dims(dims);
        let n_out: usize = od.iter().product();
        let oc = self.out_channels;
        let mut out = Tensor::zeros(&[oc, od[0], od[1], od[2], od[3]]);
        match self.kind {
            Conv4dKind::Dense => {
                let (w, b) = params.split_at(params.len() - oc);
                let cols = dense_im2col(input.data(), c, dims, self.kernel, self.stride);
                fill_bias(out.data_mut(), &[b], n_out);
                gemm(oc, c * self.kernel.iter().product::<usize>(), n_out, 1.0, w, false, &cols, false, 1.0, out.data_mut());
                Ok((out, Conv4dCache { in_dims: dims, cols, cols_tgt: Vec::new() }))
            }
            Conv4dKind::CenterPivot => {
                let [wc, bc, wt, bt] = self.split_pivot(params);
                fill_bias(out.data_mut(), &[bc, bt], n_out);

                // Context-axes convolution at the kept target positions.
                let pruned = prune_target(input.data(), c, dims, self.stride);
                let inner = od[2] * od[3];
                let cp = self.ctx_patch(dims, inner);
                let mut cols = vec![0.0; cp.rows() * n_out];
                cp.im2col(&pruned, &mut cols, n_out, 0);
                cp.apply(wc, oc, &cols, n_out, out.data_mut());

                // Target-axes convolution at the kept context positions.
                let tp = self.tgt_patch(dims);
                let mut cols_tgt = vec![0.0; tp.rows() * n_out];
                let mut plane = vec![0.0; c * dims[2] * dims[3]];
                for (q, (a, b)) in kept_context(dims, self.stride).enumerate() {
                    gather_plane(input.data(), c, dims, a, b, &mut plane);
                    tp.im2col(&plane, &mut cols_tgt, n_out, q * inner);
                }
                tp.apply(wt, oc, &cols_tgt, n_out, out.data_mut());
                Ok((out, Conv4dCache { in_dims: dims, cols, cols_tgt }))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (same layout as the
    /// parameters) and returns the input gradient when requested.
    pub fn backward(
        &self,
        cache: &Conv4dCache,
        grad_out: &Tensor,
        params: &[f64],
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let dims = cache.in_dims;
        let c = self.in_channels;
        let oc = self.out_channels;
        let od = self.out_dims(dims);
        let n_out: usize = od.iter().product();
        let g = grad_out.data();
        let mut gin = need_input_grad.then(|| Tensor::zeros(&[c, dims[0], dims[1], dims[2], dims[3]]));
        match self.kind {
            Conv4dKind::Dense => {
                let rows = c * self.kernel.iter().product::<usize>();
                let (w, _) = params.split_at(params.len() - oc);
                let (gw, gb) = grads.split_at_mut(params.len() - oc);
                gemm(oc, n_out, rows, 1.0, g, false, &cache.cols, true, 1.0, gw);
                add_bias_grad(g, gb, n_out);
                if let Some(gin) = gin.as_mut() {
                    let mut gcols = vec![0.0; rows * n_out];
                    gemm(rows, oc, n_out, 1.0, w, true, g, false, 0.0, &mut gcols);
                    dense_col2im(&gcols, gin.data_mut(), c, dims, self.kernel, self.stride);
                }
            }
            Conv4dKind::CenterPivot => {
                let [wc, _, wt, _] = self.split_pivot(params);
                let [gwc, gbc, gwt, gbt] = self.split_pivot_mut(grads);
                let inner = od[2] * od[3];
                let cp = self.ctx_patch(dims, inner);
                let tp = self.tgt_patch(dims);
                cp.weight_grad(g, oc, &cache.cols, n_out, gwc);
                tp.weight_grad(g, oc, &cache.cols_tgt, n_out, gwt);
                add_bias_grad(g, gbc, n_out);
                add_bias_grad(g, gbt, n_out);
                if let Some(gin) = gin.as_mut() {
                    let gcols = cp.cols_grad(wc, oc, g, n_out);
                    let mut gpruned = vec![0.0; c * dims[0] * dims[1] * inner];
                    cp.col2im(&gcols, &mut gpruned, n_out, 0);
                    unprune_target_add(&gpruned, gin.data_mut(), c, dims, self.stride);

                    let gcols = tp.cols_grad(wt, oc, g, n_out);
                    let mut gplane = vec![0.0; c * dims[2] * dims[3]];
                    for (q, (a, b)) in kept_context(dims, self.stride).enumerate() {
                        gplane.fill(0.0);
                        tp.col2im(&gcols, &mut gplane, n_out, q * inner);
                        scatter_plane_add(&gplane, gin.data_mut(), c, dims, a, b);
                    }
                }
            }
        }
        gin
    }

    fn pivot_lens(&self) -> [usize; 4] {
        let (o, i, k) = (self.out_channels, self.in_channels, self.kernel);
        [o * i * k[0] * k[1], o, o * i * k[2] * k[3], o]
    }

    fn split_pivot<'a>(&self, p: &'a [f64]) -> [&'a [f64]; 4] {
        let [l0, l1, l2, _] = self.pivot_lens();
        let (wc, rest) = p.split_at(l0);
        let (bc, rest) = rest.split_at(l1);
        let (wt, bt) = rest.split_at(l2);
        [wc, bc, wt, bt]
    }

    fn split_pivot_mut<'a>(&self, p: &'a mut [f64]) -> [&'a mut [f64]; 4] {
        let [l0, l1, l2, _] = self.pivot_lens();
        let (wc, rest) = p.split_at_mut(l0);
        let (bc, rest) = rest.split_at_mut(l1);
        let (wt, bt) = rest.split_at_mut(l2);
        [wc, bc, wt, bt]
    }

    /// The dense kernel a center-pivot layer is equivalent to (its bias is the
    /// sum of both pivot biases). Dense layers are returned unchanged.
    pub fn to_dense_params(&self, params: &[f64]) -> Vec<f64> {
        if self.kind == Conv4dKind::Dense {
            return params.to_vec();
        }
        let [wc, bc, wt, bt] = self.split_pivot(params);
        let (o, i, k) = (self.out_channels, self.in_channels, self.kernel);
        let (c0, c1, c2, c3) = (k[0] / 2, k[1] / 2, k[2] / 2, k[3] / 2);
        let kk: usize = k.iter().product();
        let mut dense = vec![0.0; o * i * kk + o];
        for oi in 0..o * i {
            let base = oi * kk;
            for a in 0..k[0] {
                for b in 0..k[1] {
                    dense[base + ((a * k[1] + b) * k[2] + c2) * k[3] + c3] += wc[(oi * k[0] + a) * k[1] + b];
                }
            }
            for d in 0..k[2] {
                for e in 0..k[3] {
                    dense[base + ((c0 * k[1] + c1) * k[2] + d) * k[3] + e] += wt[(oi * k[2] + d) * k[3] + e];
                }
            }
        }
        for oo in 0..o {
            dense[o * i * kk + oo] = bc[oo] + bt[oo];
        }
        dense
    }
}

fn fill_bias(out: &mut [f64], biases: &[&[f64]], n: usize) {
    for (o, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(biases.iter().map(|b| b[o]).sum());
    }
}

fn add_bias_grad(g: &[f64], gb: &mut [f64], n: usize) {
    for (o, chunk) in g.chunks_exact(n).enumerate() {
        gb[o] += chunk.iter().sum::<f64>();
    }
}

fn kept_context(dims: [usize; 4], stride: [usize; 4]) -> impl Iterator<Item = (usize, usize)> {
    let (oa, ob) = (out_len(dims[0], stride[0]), out_len(dims[1], stride[1]));
    (0..oa).flat_map(move |a| (0..ob).map(move |b| (a * stride[0], b * stride[1])))
}

fn prune_target(input: &[f64], c: usize, dims: [usize; 4], stride: [usize; 4]) -> Vec<f64> {
    if stride[2] == 1 && stride[3] == 1 {
        return input.to_vec();
    }
    let [a, b, d, e] = dims;
    let (od, oe) = (out_len(d, stride[2]), out_len(e, stride[3]));
    let mut out = Vec::with_capacity(c * a * b * od * oe);
    for cab in 0..c * a * b {
        for y in 0..od {
            for x in 0..oe {
                out.push(input[(cab * d + y * stride[2]) * e + x * stride[3]]);
            }
        }
    }
    out
}

fn unprune_target_add(g: &[f64], gin: &mut [f64], c: usize, dims: [usize; 4], stride: [usize; 4]) {
    let [a, b, d, e] = dims;
    let (od, oe) = (out_len(d, stride[2]), out_len(e, stride[3]));
    let mut it = g.iter();
    for cab in 0..c * a * b {
        for y in 0..od {
            for x in 0..oe {
                gin[(cab * d + y * stride[2]) * e + x * stride[3]] += it.next().unwrap();
            }
        }
    }
}

fn gather_plane(input: &[f64], c: usize, dims: [usize; 4], a: usize, b: usize, plane: &mut [f64]) {
    let [da, db, d, e] = dims;
    let n = d * e;
    for ci in 0..c {
        let src = ((ci * da + a) * db + b) * n;
        plane[ci * n..][..n].copy_from_slice(&input[src..src + n]);
    }
}

fn scatter_plane_add(plane: &[f64], gin: &mut [f64], c: usize, dims: [usize; 4], a: usize, b: usize) {
    let [da, db, d, e] = dims;
    let n = d * e;
    for ci in 0..c {
        let dst = ((ci * da + a) * db + b) * n;
        for (g, p) in gin[dst..dst + n].iter_mut().zip(&plane[ci * n..][..n]) {
            *g += p;
        }
    }
}

/// Patch matrix `[C·k⁴, A'·B'·D'·E']` for the dense convolution.
fn dense_im2col(input: &[f64], c: usize, dims: [usize; 4], k: [usize; 4], s: [usize; 4]) -> Vec<f64> {
    let od: [usize; 4] = core::array::from_fn(|i| out_len(dims[i], s[i]));
    let n_out: usize = od.iter().product();
    let mut cols = vec![0.0; c * k.iter().product::<usize>() * n_out];
    dense_walk(c, dims, k, s, od, |row, col, src| cols[row * n_out + col] = input[src]);
    cols
}

fn dense_col2im(gcols: &[f64], gin: &mut [f64], c: usize, dims: [usize; 4], k: [usize; 4], s: [usize; 4]) {
    let od: [usize; 4] = core::array::from_fn(|i| out_len(dims[i], s[i]));
    let n_out: usize = od.iter().product();
    dense_walk(c, dims, k, s, od, |row, col, src| gin[src] += gcols[row * n_out + col]);
}

/// Visits every in-bounds (patch row, output column, input index) triple.
fn dense_walk(
    c: usize,
    dims: [usize; 4],
    k: [usize; 4],
    s: [usize; 4],
    od: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    // Per-axis list of (output index, input index) pairs for each kernel tap.
    let taps: [Vec<Vec<(usize, usize)>>; 4] = core::array::from_fn(|ax| {
        let p = (k[ax] / 2) as isize;
        (0..k[ax])
            .map(|t| {
                (0..od[ax])
                    .filter_map(|o| {
                        let i = (o * s[ax] + t) as isize - p;
                        (i >= 0 && i < dims[ax] as isize).then_some((o, i as usize))
                    })
                    .collect()
            })
            .collect()
    });
    let mut row = 0;
    for ci in 0..c {
        for t0 in &taps[0] {
            for t1 in &taps[1] {
                for t2 in &taps[2] {
                    for t3 in &taps[3] {
                        for &(o0, i0) in t0 {
                            for &(o1, i1) in t1 {
                                for &(o2, i2) in t2 {
                                    let col_base = ((o0 * od[1] + o1) * od[2] + o2) * od[3];
                                    let src_base = (((ci * dims[0] + i0) * dims[1] + i1) * dims[2] + i2) * dims[3];
                                    for &(o3, i3) in t3 {
                                        f(row, col_base + o3, src_base + i3);
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

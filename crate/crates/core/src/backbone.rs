//! Frozen residual feature extractor.
//!
//! No pretrained classifier weights ship with the crate, so the backbone is a
//! ResNet-34-shaped network (basic blocks, `[3, 4, 6, 3]`) at reduced width
//! whose weights are drawn once from a fixed seed. Every convolution is
//! followed by a frozen per-channel affine normalization, the inference form
//! of batch normalization, whose statistics are measured once on seeded
//! random images of flat-colored shapes. Without it the activations of a
//! random residual stack drift toward one shared direction and every
//! position looks alike under cosine similarity. For the same reason each
//! residual branch is scaled by a small gain before it joins the skip path,
//! as in small-residual initialization schemes, so local color and layout
//! survive to the deeper blocks.
//!
//! Features are read at the end of every block of the last three stages,
//! before the block's ReLU, which gives 4, 6 and 3 layers at strides 8, 16
//! and 32.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv2d::Conv2d;
use crate::error::{cfg_err, dim_err, Result};
use crate::norm::relu_inplace;
use crate::tensor::Tensor;

pub const DEFAULT_BACKBONE_ID: &str = "random-resnet";
pub const DEFAULT_BACKBONE_SEED: u64 = 0x5a41_1c0d;

const STEM_WIDTH: usize = 16;
const WIDTHS: [usize; 4] = [16, 32, 64, 128];
const BLOCKS: [usize; 4] = [3, 4, 6, 3];
/// Stages whose block outputs form the pyramid.
pub const FEATURE_STAGES: [usize; 3] = [1, 2, 3];

const CALIBRATION_IMAGES: usize = 8;
const CALIBRATION_SIZE: usize = 64;
const NORM_EPS: f64 = 1e-5;
/// Weight of the residual branch relative to the skip path.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Number of layers at each pyramid level, fine to coarse.
pub fn level_layer_counts() -> Vec<usize> {
    FEATURE_STAGES.iter().map(|&s| BLOCKS[s]).collect()
}

/// A convolution plus the offsets of its weights in the parameter vector and
/// of its frozen normalization (`scale`, then `shift`) in the norm vector.
#[derive(Debug, Clone)]
struct Op {
    conv: Conv2d,
    weights: usize,
    norm: usize,
}

#[derive(Debug, Clone)]
struct Block {
    stage: usize,
    a: Op,
    b: Op,
    proj: Option<Op>,
}

/// Feature maps `[C, h, w]` ordered fine to coarse.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub layers: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Layer indices grouped by spatial size, fine to coarse.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match out.last_mut() {
                Some(g) if self.layers[g[0]].shape()[1..] == l.shape()[1..] => g.push(i),
                _ => out.push(alloc::vec![i]),
            }
        }
        out
    }

    /// `(h, w)` of every layer.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.shape()[1], l.shape()[2])).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    id: String,
    stem: Op,
    blocks: Vec<Block>,
    params: Vec<f64>,
    norms: Vec<f64>,
}

/// A seeded scene: a random background with a few flat-colored rectangles
/// and disks, in `[0,1]`.
fn calibration_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let mut img = Tensor::zeros(&[3, size, size]);
    let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let d = img.data_mut();
    for c in 0..3 {
        d[c * size * size..(c + 1) * size * size].iter_mut().for_each(|v| *v = bg[c]);
    }
    for _ in 0..rng.random_range(2..6) {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let r = rng.random_range(0.08..0.3) * size as f64;
        let (cx, cy) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let disk = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disk { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r };
                if inside {
                    for c in 0..3 {
                        d[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    }
    img
}

impl Backbone {
    /// Builds a backbone from its identifier: `random-resnet` or
    /// `random-resnet:<seed>`.
    pub fn from_id(id: &str) -> Result<Self> {
        let seed = match id.split_once(':') {
            None if id == DEFAULT_BACKBONE_ID => DEFAULT_BACKBONE_SEED,
            Some((DEFAULT_BACKBONE_ID, s)) => {
                s.parse().map_err(|_| cfg_err!("bad backbone seed in {id:?}"))?
            }
            _ => return Err(cfg_err!("unknown backbone {id:?}")),
        };
        Ok(Self::random(id, seed))
    }

    fn random(id: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut op = |conv: Conv2d, rng: &mut ChaCha8Rng| -> Op {
            let weights = params.len();
            // He-uniform, zero bias.
            let bound = libm::sqrt(6.0 / (conv.in_channels * conv.kernel * conv.kernel) as f64);
            params.extend((0..conv.weight_len()).map(|_| rng.random_range(-bound..bound)));
            params.extend(core::iter::repeat_n(0.0, conv.out_channels));
            let norm = norms.len();
            norms.extend(core::iter::repeat_n(1.0, conv.out_channels));
            norms.extend(core::iter::repeat_n(0.0, conv.out_channels));
            Op { conv, weights, norm }
        };
        let conv = |i, o, k, s| Conv2d::new(i, o, k, s).expect("odd kernel");
        let stem = op(conv(3, STEM_WIDTH, 3, 2), &mut rng);
        let mut blocks = Vec::new();
        let mut in_ch = STEM_WIDTH;
        for (stage, (&w, &n)) in WIDTHS.iter().zip(&BLOCKS).enumerate() {
            for i in 0..n {
                let stride = if i == 0 { 2 } else { 1 };
                let a = op(conv(in_ch, w, 3, stride), &mut rng);
                let b = op(conv(w, w, 3, 1), &mut rng);
                let proj = (stride != 1 || in_ch != w).then(|| op(conv(in_ch, w, 1, stride), &mut rng));
                blocks.push(Block { stage, a, b, proj });
                in_ch = w;
            }
        }
        let mut bb = Self { id: id.into(), stem, blocks, params, norms: Vec::new() };
        let images: Vec<Tensor> = (0..CALIBRATION_IMAGES).map(|_| calibration_image(&mut rng, CALIBRATION_SIZE)).collect();
        bb.run(images, Some(&mut norms));
        bb.norms = norms;
        bb
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Convolution weights and biases.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Per-channel normalization scales and shifts, convolution by
    /// convolution.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// FNV-1a over the parameter bits; changes if any weight changes.
    pub fn fingerprint(&self) -> u64 {
        self.params.iter().chain(&self.norms).flat_map(|p| p.to_bits().to_le_bytes()).fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
        })
    }

    /// Applies one convolution and its normalization to every input. When
    /// calibrating, the normalization is first set from the batch so that
    /// each channel has zero mean and unit variance.
    fn apply(&self, op: &Op, xs: &[Tensor], calibrate: &mut Option<&mut Vec<f64>>) -> Vec<Tensor> {
        let (conv, wl, oc) = (&op.conv, op.conv.weight_len(), op.conv.out_channels);
        let mut ys: Vec<Tensor> = xs
            .iter()
            .map(|x| {
                let w = &self.params[op.weights..op.weights + wl];
                let b = &self.params[op.weights + wl..][..oc];
                conv.forward(x, w, Some(b)).expect("backbone shapes are consistent").0
            })
            .collect();
        if let Some(norms) = calibrate.as_deref_mut() {
            let mut stats = vec![(0.0, 0.0, 0usize); oc];
            for y in &ys {
                let hw = y.spatial_len();
                for (c, st) in stats.iter_mut().enumerate() {
                    for v in &y.data()[c * hw..(c + 1) * hw] {
                        st.0 += v;
                        st.1 += v * v;
                        st.2 += 1;
                    }
                }
            }
            for (c, (s, s2, n)) in stats.into_iter().enumerate() {
                let mean = s / n as f64;
                let var = (s2 / n as f64 - mean * mean).max(0.0);
                let scale = 1.0 / libm::sqrt(var + NORM_EPS);
                norms[op.norm + c] = scale;
                norms[op.norm + oc + c] = -mean * scale;
            }
        }
        let norms = calibrate.as_deref().unwrap_or(&self.norms);
        let (scale, shift) = norms[op.norm..op.norm + 2 * oc].split_at(oc);
        for y in &mut ys {
            let hw = y.spatial_len();
            for (c, ch) in y.data_mut().chunks_exact_mut(hw).enumerate() {
                ch.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
            }
        }
        ys
    }

    fn run(&self, images: Vec<Tensor>, mut calibrate: Option<&mut Vec<f64>>) -> Vec<FeaturePyramid> {
        let calibrate = &mut calibrate;
        let mut xs = images;
        xs.iter_mut().for_each(|x| x.map_inplace(|v| (v - 0.5) * 4.0));
        xs = self.apply(&self.stem, &xs, calibrate);
        xs.iter_mut().for_each(relu_inplace);
        let mut pyramids = vec![FeaturePyramid { layers: Vec::new() }; xs.len()];
        for block in &self.blocks {
            let mut h = self.apply(&block.a, &xs, calibrate);
            h.iter_mut().for_each(relu_inplace);
            let mut ys = self.apply(&block.b, &h, calibrate);
            ys.iter_mut().for_each(|y| y.map_inplace(|v| v * RESIDUAL_GAIN));
            let skips = match &block.proj {
                Some(p) => self.apply(p, &xs, calibrate),
                None => xs,
            };
            for ((y, skip), pyr) in ys.iter_mut().zip(&skips).zip(&mut pyramids) {
                y.add_assign(skip).expect("residual shapes match");
                if FEATURE_STAGES.contains(&block.stage) {
                    pyr.layers.push(y.clone());
                }
                relu_inplace(y);
            }
            xs = ys;
        }
        pyramids
    }

    /// Runs an RGB image `[3, H, W]` with values in `[0,1]`.
    pub fn features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(dim_err!("backbone expects a [3,H,W] image, got {:?}", image.shape()));
        }
        Ok(self.run(alloc::vec![image.clone()], None).pop().expect("one image in, one out"))
    }
}

/// Extracts the pyramid of an image already resized to `input_size`
/// (`(H, W)`).
pub fn extract_feature_pyramid(backbone: &Backbone, image: &Tensor, input_size: (usize, usize)) -> Result<FeaturePyramid> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[1], shape[2]) != input_size {
        return Err(dim_err!("image {:?} does not match input size {:?}", shape, input_size));
    }
    backbone.features(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_follow_strides() {
        let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.3);
        let p = extract_feature_pyramid(&bb, &img, (64, 64)).unwrap();
        assert_eq!(p.layers.len(), 13);
        let sizes: Vec<usize> = p.groups().iter().map(|g| g.len()).collect();
        assert_eq!(sizes, [4, 6, 3]);
        assert_eq!(p.sizes()[0], (8, 8));
        assert_eq!(p.sizes()[4], (4, 4));
        assert_eq!(p.sizes()[12], (2, 2));
    }

    #[test]
    fn wrong_size_rejected() {
        let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
        assert!(extract_feature_pyramid(&bb, &Tensor::zeros(&[3, 32, 32]), (64, 64)).is_err());
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(Backbone::from_id("resnet50").is_err());
        assert!(Backbone::from_id("random-resnet:x").is_err());
        assert_ne!(
            Backbone::from_id("random-resnet:1").unwrap().fingerprint(),
            Backbone::from_id("random-resnet:2").unwrap().fingerprint()
        );
    }
}

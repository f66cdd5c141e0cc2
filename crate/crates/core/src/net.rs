//! The in-context prediction network: 4D squeeze blocks per hypercorrelation
//! level, top-down mix blocks, a mean over context positions and a 2D
//! decoder ending in a two-channel softmax.
//!
//! All trainable parameters live in one flat vector. Every block is a named
//! slice of it, and gradients come back in the same layout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_feature_pyramid, level_layer_counts, Backbone, FeaturePyramid, DEFAULT_BACKBONE_ID};
use crate::conv2d::{Conv2d, Conv2dCache};
use crate::conv4d::{Conv4d, Conv4dCache, Conv4dKind};
use crate::correlation::{mask_and_correlate, HypercorrelationPyramid};
use crate::error::{cfg_err, dim_err, Result};
use crate::heatmap::{average_heatmaps, encode_prompts, HeatmapConfig, PromptSet, SaliencyHeatmap};
use crate::interp::{resize_axes, resize_axes_backward};
use crate::norm::{relu_backward_inplace, relu_inplace, GroupNorm, GroupNormCache};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NetConfig {
    /// Depth of every squeeze and mix block.
    pub num_4dconv_layers: usize,
    pub group_norm_groups: usize,
    /// Widths of the two decoder stages.
    pub decoder_channels: Vec<usize>,
    pub backbone_id: String,
    /// `(H, W)` both images are resized to.
    pub input_size: (usize, usize),
    pub conv4d: Conv4dKind,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_4dconv_layers: 3,
            group_norm_groups: 4,
            decoder_channels: vec![64, 64],
            backbone_id: DEFAULT_BACKBONE_ID.into(),
            input_size: (224, 224),
            conv4d: Conv4dKind::CenterPivot,
            seed: 0,
        }
    }
}

/// Squeeze kernels and context strides per level (fine, mid, coarse) for the
/// first three layers of a block; deeper layers use kernel 3, stride 1.
const SQUEEZE_KERNELS: [[usize; 3]; 3] = [[5, 5, 3], [5, 3, 3], [3, 3, 3]];
const SQUEEZE_STRIDES: [[usize; 3]; 3] = [[4, 4, 2], [4, 2, 2], [2, 2, 2]];

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_4dconv_layers == 0 {
            return Err(cfg_err!("num_4dconv_layers must be at least 1"));
        }
        if self.group_norm_groups == 0 {
            return Err(cfg_err!("group_norm_groups must be positive"));
        }
        if self.decoder_channels.len() != 2 || self.decoder_channels.contains(&0) {
            return Err(cfg_err!("decoder_channels must hold two positive widths"));
        }
        if self.input_size.0 < 32 || self.input_size.1 < 32 {
            return Err(cfg_err!("input_size must be at least 32x32, got {:?}", self.input_size));
        }
        for w in self.squeeze_widths() {
            if w % self.group_norm_groups != 0 {
                return Err(cfg_err!("width {w} is not divisible into {} groups", self.group_norm_groups));
            }
        }
        Ok(())
    }

    /// Output widths of the squeeze layers; the last one is the width of the
    /// mix blocks and of the context code.
    pub fn squeeze_widths(&self) -> Vec<usize> {
        match self.num_4dconv_layers {
            1 => vec![48],
            2 => vec![32, 96],
            d => {
                let mut w = vec![16, 64, 128];
                w.resize(d, 128);
                w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Const(f64),
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Default)]
struct Layout {
    specs: Vec<ParamSpec>,
    len: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.len;
        self.len += shape.iter().product::<usize>();
        self.specs.push(ParamSpec { name, shape, offset, init });
        offset
    }

    fn conv4d(&mut self, prefix: &str, conv: &Conv4d) -> usize {
        let bound = 1.0 / libm::sqrt(conv.fan_in() as f64);
        let start = self.len;
        for (name, shape) in conv.param_shapes() {
            self.push(format!("{prefix}.conv.{name}"), shape, Init::Uniform(bound));
        }
        start
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> usize {
        let off = self.push(format!("{prefix}.norm.weight"), vec![channels], Init::Const(1.0));
        self.push(format!("{prefix}.norm.bias"), vec![channels], Init::Const(0.0));
        off
    }

    fn conv2d(&mut self, prefix: &str, conv: &Conv2d) -> usize {
        let bound = 1.0 / libm::sqrt((conv.in_channels * conv.kernel * conv.kernel) as f64);
        let (o, i, k) = (conv.out_channels, conv.in_channels, conv.kernel);
        let off = self.push(format!("{prefix}.weight"), vec![o, i, k, k], Init::Uniform(bound));
        self.push(format!("{prefix}.bias"), vec![o], Init::Uniform(bound));
        off
    }
}

/// 4D conv → group norm → ReLU.
#[derive(Debug, Clone)]
pub struct Layer4d {
    pub conv: Conv4d,
    pub norm: GroupNorm,
    conv_off: usize,
    norm_off: usize,
}

impl Layer4d {
    fn conv_range(&self) -> core::ops::Range<usize> {
        self.conv_off..self.conv_off + self.conv.param_len()
    }

    fn norm_range(&self) -> core::ops::Range<usize> {
        self.norm_off..self.norm_off + self.norm.param_len()
    }
}

/// A stack of [`Layer4d`]; used for both squeeze and mix blocks.
#[derive(Debug, Clone)]
pub struct Block4d {
    pub layers: Vec<Layer4d>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    conv: Conv4dCache,
    norm: GroupNormCache,
    out: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockTape {
    layers: Vec<LayerTape>,
}

impl BlockTape {
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("blocks are non-empty").out
    }
}

impl Block4d {
    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<BlockTape> {
        let mut tapes: Vec<LayerTape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &tapes[i - 1].out };
            let (y, conv) = layer.conv.forward(input, &params[layer.conv_range()])?;
            let (mut out, norm) = layer.norm.forward(&y, &params[layer.norm_range()])?;
            relu_inplace(&mut out);
            tapes.push(LayerTape { conv, norm, out });
        }
        Ok(BlockTape { layers: tapes })
    }

    fn backward(&self, params: &[f64], grads: &mut [f64], tape: &BlockTape, grad: Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad;
        for (i, (layer, lt)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            relu_backward_inplace(&mut g, &lt.out);
            let nr = layer.norm_range();
            let gy = layer.norm.backward(&lt.norm, &g, &params[nr.clone()], &mut grads[nr]);
            let cr = layer.conv_range();
            let need = i > 0 || need_input;
            match layer.conv.backward(&lt.conv, &gy, &params[cr.clone()], &mut grads[cr], need) {
                Some(t) => g = t,
                None => return None,
            }
        }
        Some(g)
    }
}

/// Bilinearly resizes all four spatial axes of `[C, A, B, D, E]` to `dims`.
pub fn upsample_volume(volume: &Tensor, dims: &[usize]) -> Tensor {
    resize_axes(volume, &[1, 2, 3, 4], dims)
}

/// Mean over the context axes: `[C, A, B, D, E]` → `[C, D, E]`.
pub fn context_mean(volume: &Tensor) -> Tensor {
    let s = volume.shape();
    let (c, ab, de) = (s[0], s[1] * s[2], s[3] * s[4]);
    let mut out = Tensor::zeros(&[c, s[3], s[4]]);
    let src = volume.data();
    for (ch, dst) in out.data_mut().chunks_exact_mut(de).enumerate() {
        for q in 0..ab {
            for (d, v) in dst.iter_mut().zip(&src[(ch * ab + q) * de..][..de]) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= ab as f64);
    }
    out
}

fn context_mean_backward(grad: &Tensor, dims: &[usize]) -> Tensor {
    let (c, ab, de) = (grad.shape()[0], dims[0] * dims[1], dims[2] * dims[3]);
    let mut out = Tensor::zeros(&[c, dims[0], dims[1], dims[2], dims[3]]);
    let g = grad.data();
    for (i, chunk) in out.data_mut().chunks_exact_mut(de).enumerate() {
        let ch = i / ab;
        for (d, v) in chunk.iter_mut().zip(&g[ch * de..][..de]) {
            *d = v / ab as f64;
        }
    }
    out
}

fn vol_dims(t: &Tensor) -> Vec<usize> {
    t.shape()[1..].to_vec()
}

/// Intermediate values of one [`CorrelationNet::encode_pyramid`] call.
#[derive(Debug, Clone)]
pub struct EncodeTape {
    squeeze: Vec<BlockTape>,
    mix: Vec<BlockTape>,
    /// Dims of the upper volume fed into each mix block.
    mix_upper_dims: Vec<Vec<usize>>,
    mixed_dims: Vec<usize>,
}

/// Intermediate values of one [`CorrelationNet::decode_context`] call.
#[derive(Debug, Clone)]
pub struct DecodeTape {
    caches: Vec<Conv2dCache>,
    relu_outs: Vec<Tensor>,
    code_size: (usize, usize),
    foreground: Vec<f64>,
    argmax: usize,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub heatmap: SaliencyHeatmap,
    /// Softmax channels before max-normalization.
    pub foreground: Vec<f64>,
    pub background: Vec<f64>,
    pub tape: DecodeTape,
}

/// Everything needed to backpropagate one prediction.
#[derive(Debug, Clone)]
pub struct Forward {
    pub code: Tensor,
    pub decoded: Decoded,
    encode: EncodeTape,
}

impl Forward {
    pub fn heatmap(&self) -> &SaliencyHeatmap {
        &self.decoded.heatmap
    }
}

#[derive(Debug, Clone)]
pub struct CorrelationNet {
    config: NetConfig,
    squeeze: Vec<Block4d>,
    /// `mix[l]` merges the coarser result into level `l`.
    mix: Vec<Block4d>,
    decoder: Vec<(Conv2d, usize)>,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
}

impl CorrelationNet {
    /// Builds and initializes the network for the pyramid of `backbone_id`.
    pub fn new(config: NetConfig) -> Result<Self> {
        Self::with_levels(config, &level_layer_counts())
    }

    /// Builds the network for hypercorrelation levels with the given channel
    /// counts, fine to coarse.
    pub fn with_levels(config: NetConfig, level_channels: &[usize]) -> Result<Self> {
        config.validate()?;
        if level_channels.is_empty() || level_channels.len() > SQUEEZE_KERNELS.len() {
            return Err(cfg_err!("between 1 and 3 pyramid levels are supported, got {}", level_channels.len()));
        }
        let kind = config.conv4d;
        let groups = config.group_norm_groups;
        let widths = config.squeeze_widths();
        let width = *widths.last().expect("depth >= 1");
        let mut layout = Layout::default();
        let layer = |layout: &mut Layout, prefix: String, i: usize, o: usize, k: usize, s: usize| -> Result<Layer4d> {
            let conv = Conv4d::new(kind, i, o, [k; 4], [s, s, 1, 1])?;
            let norm = GroupNorm::new(groups, o)?;
            let conv_off = layout.conv4d(&prefix, &conv);
            let norm_off = layout.norm(&prefix, o);
            Ok(Layer4d { conv, norm, conv_off, norm_off })
        };

        let mut squeeze = Vec::new();
        for (l, &ch) in level_channels.iter().enumerate() {
            let mut layers = Vec::new();
            let mut in_ch = ch;
            for (j, &o) in widths.iter().enumerate() {
                let (k, s) = if j < 3 { (SQUEEZE_KERNELS[l][j], SQUEEZE_STRIDES[l][j]) } else { (3, 1) };
                layers.push(layer(&mut layout, format!("squeeze.{l}.{j}"), in_ch, o, k, s)?);
                in_ch = o;
            }
            squeeze.push(Block4d { layers });
        }
        let mut mix = Vec::new();
        for l in 0..level_channels.len() - 1 {
            let layers = (0..widths.len())
                .map(|j| layer(&mut layout, format!("mix.{l}.{j}"), width, width, 3, 1))
                .collect::<Result<Vec<_>>>()?;
            mix.push(Block4d { layers });
        }

        let [d0, d1] = [config.decoder_channels[0], config.decoder_channels[1]];
        let mut decoder = Vec::new();
        for (i, (cin, cout)) in [(width, width), (width, d0), (d0, d1), (d1, 2)].into_iter().enumerate() {
            let conv = Conv2d::new(cin, cout, 3, 1)?;
            let off = layout.conv2d(&format!("decoder.{i}"), &conv);
            decoder.push((conv, off));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(layout.len);
        for spec in &layout.specs {
            match spec.init {
                Init::Uniform(b) => params.extend((0..spec.len()).map(|_| rng.random_range(-b..b))),
                Init::Const(v) => params.extend(core::iter::repeat_n(v, spec.len())),
            }
        }
        Ok(Self { config, squeeze, mix, decoder, specs: layout.specs, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replaces all parameters; the length must match.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(dim_err!("expected {} parameters, got {}", self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.params[s.range()])
    }

    pub fn squeeze_blocks(&self) -> &[Block4d] {
        &self.squeeze
    }

    pub fn mix_blocks(&self) -> &[Block4d] {
        &self.mix
    }

    /// Squeezes every level, merges them top-down and averages out the
    /// context axes. Returns the code `[width, D, E]` over the finest target
    /// grid.
    pub fn encode_pyramid(&self, hcp: &HypercorrelationPyramid) -> Result<(Tensor, EncodeTape)> {
        if hcp.levels.len() != self.squeeze.len() {
            return Err(dim_err!("expected {} correlation levels, got {}", self.squeeze.len(), hcp.levels.len()));
        }
        let p = &self.params;
        let squeeze = self
            .squeeze
            .iter()
            .zip(&hcp.levels)
            .map(|(b, v)| b.forward(p, v))
            .collect::<Result<Vec<_>>>()?;
        let mut mix = Vec::with_capacity(self.mix.len());
        let mut mix_upper_dims = Vec::with_capacity(self.mix.len());
        for l in (0..self.mix.len()).rev() {
            let upper = match mix.last() {
                Some(t) => BlockTape::output(t),
                None => squeeze[l + 1].output(),
            };
            let lower = squeeze[l].output();
            if upper.shape()[0] != lower.shape()[0] {
                return Err(cfg_err!("mix inputs have {} and {} channels", upper.shape()[0], lower.shape()[0]));
            }
            let mut x = upsample_volume(upper, &vol_dims(lower));
            x.add_assign(lower)?;
            mix_upper_dims.push(vol_dims(upper));
            mix.push(self.mix[l].forward(p, &x)?);
        }
        let top = mix.last().map_or_else(|| squeeze[0].output(), BlockTape::output);
        let mixed_dims = vol_dims(top);
        let code = context_mean(top);
        Ok((code, EncodeTape { squeeze, mix, mix_upper_dims, mixed_dims }))
    }

    /// Upsamples `upper` to the dims of `lower`, adds them and runs mix
    /// block `l`.
    pub fn mix_block(&self, l: usize, upper: &Tensor, lower: &Tensor) -> Result<Tensor> {
        let block = self.mix.get(l).ok_or_else(|| cfg_err!("no mix block {l}"))?;
        if upper.shape()[0] != lower.shape()[0] {
            return Err(cfg_err!("mix inputs have {} and {} channels", upper.shape()[0], lower.shape()[0]));
        }
        let mut x = upsample_volume(upper, &vol_dims(lower));
        x.add_assign(lower)?;
        Ok(block.forward(&self.params, &x)?.output().clone())
    }

    /// Runs squeeze block `l` on one correlation level.
    pub fn squeeze_block(&self, l: usize, volume: &Tensor) -> Result<Tensor> {
        let block = self.squeeze.get(l).ok_or_else(|| cfg_err!("no squeeze block {l}"))?;
        Ok(block.forward(&self.params, volume)?.output().clone())
    }

    fn run2d(&self, i: usize, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let (conv, off) = &self.decoder[i];
        let w = &self.params[*off..off + conv.weight_len()];
        let b = &self.params[off + conv.weight_len()..][..conv.out_channels];
        conv.forward(x, w, Some(b))
    }

    /// Decodes a context code into a max-normalized heatmap at the input size.
    pub fn decode_context(&self, code: &Tensor) -> Result<Decoded> {
        let width = self.squeeze[0].layers.last().expect("non-empty").conv.out_channels;
        let &[c, d, e] = code.shape() else {
            return Err(dim_err!("context code must be [C,H,W], got {:?}", code.shape()));
        };
        if c != width {
            return Err(dim_err!("context code has {c} channels, expected {width}"));
        }
        let (h, w) = self.config.input_size;
        let mut caches = Vec::with_capacity(4);
        let mut relu_outs = Vec::with_capacity(3);
        let (mut x, cache) = self.run2d(0, code)?;
        caches.push(cache);
        relu_inplace(&mut x);
        relu_outs.push(x);
        let (mut x, cache) = self.run2d(1, &relu_outs[0])?;
        caches.push(cache);
        relu_inplace(&mut x);
        let up = resize_axes(&x, &[1, 2], &[2 * d, 2 * e]);
        relu_outs.push(x);
        let (mut x, cache) = self.run2d(2, &up)?;
        caches.push(cache);
        relu_inplace(&mut x);
        relu_outs.push(x);
        let (logits, cache) = self.run2d(3, &relu_outs[2])?;
        caches.push(cache);
        let logits = resize_axes(&logits, &[1, 2], &[h, w]);

        let (bg_logit, fg_logit) = logits.data().split_at(h * w);
        let foreground: Vec<f64> = fg_logit
            .iter()
            .zip(bg_logit)
            .map(|(f, b)| 1.0 / (1.0 + libm::exp(b - f)))
            .collect();
        let background: Vec<f64> = fg_logit
            .iter()
            .zip(bg_logit)
            .map(|(f, b)| 1.0 / (1.0 + libm::exp(f - b)))
            .collect();
        let mut argmax = 0;
        for (i, v) in foreground.iter().enumerate() {
            if *v > foreground[argmax] {
                argmax = i;
            }
        }
        let m = foreground[argmax];
        let data: Vec<f64> = foreground.iter().map(|v| (v / m).min(1.0)).collect();
        let heatmap = SaliencyHeatmap::from_vec(h, w, data)?;
        let tape = DecodeTape { caches, relu_outs, code_size: (d, e), foreground: foreground.clone(), argmax };
        Ok(Decoded { heatmap, foreground, background, tape })
    }

    pub fn forward(&self, hcp: &HypercorrelationPyramid) -> Result<Forward> {
        let (code, encode) = self.encode_pyramid(hcp)?;
        let decoded = self.decode_context(&code)?;
        Ok(Forward { code, decoded, encode })
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss
    /// gradient w.r.t. the predicted heatmap. Accumulates into `grads`.
    pub fn backward(&self, fwd: &Forward, grad_heatmap: &[f64], grads: &mut [f64]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if grad_heatmap.len() != h * w || grads.len() != self.params.len() {
            return Err(dim_err!("gradient buffers do not match the network"));
        }
        let tape = &fwd.decoded.tape;

        // Max-normalization: y_i = f_i / f_k with k the argmax.
        let fg = &tape.foreground;
        let m = fg[tape.argmax];
        let mut gf: Vec<f64> = grad_heatmap.iter().map(|g| g / m).collect();
        gf[tape.argmax] -= grad_heatmap.iter().zip(fg).map(|(g, f)| g * f).sum::<f64>() / (m * m);
        // Two-channel softmax, foreground = σ(z1 − z0).
        let mut gl = vec![0.0; 2 * h * w];
        for (i, (g, f)) in gf.iter().zip(fg).enumerate() {
            let d = g * f * (1.0 - f);
            gl[i] = -d;
            gl[h * w + i] = d;
        }
        let (d, e) = tape.code_size;
        let gl = Tensor::from_vec(&[2, h, w], gl)?;
        let gl = resize_axes_backward(&gl, &[1, 2], &[2 * d, 2 * e]);

        let mut g = self.conv2d_backward(3, &tape.caches[3], &gl, grads);
        relu_backward_inplace(&mut g, &tape.relu_outs[2]);
        let g = self.conv2d_backward(2, &tape.caches[2], &g, grads);
        let mut g = resize_axes_backward(&g, &[1, 2], &[d, e]);
        relu_backward_inplace(&mut g, &tape.relu_outs[1]);
        let mut g = self.conv2d_backward(1, &tape.caches[1], &g, grads);
        relu_backward_inplace(&mut g, &tape.relu_outs[0]);
        let gcode = self.conv2d_backward(0, &tape.caches[0], &g, grads);

        self.encode_backward(&fwd.encode, &gcode, grads);
        Ok(())
    }

    fn conv2d_backward(&self, i: usize, cache: &Conv2dCache, g: &Tensor, grads: &mut [f64]) -> Tensor {
        let (conv, off) = &self.decoder[i];
        let wl = conv.weight_len();
        let (gw, gb) = grads[*off..off + wl + conv.out_channels].split_at_mut(wl);
        conv.backward(cache, g, &self.params[*off..off + wl], gw, Some(gb), true).expect("input grad requested")
    }

    fn encode_backward(&self, tape: &EncodeTape, gcode: &Tensor, grads: &mut [f64]) {
        let p = &self.params;
        let mut g = context_mean_backward(gcode, &tape.mixed_dims);
        let levels = self.squeeze.len();
        let mut sq_grads: Vec<Option<Tensor>> = vec![None; levels];
        // Mix blocks ran coarse to fine; unwind fine to coarse.
        for step in (0..self.mix.len()).rev() {
            let l = self.mix.len() - 1 - step;
            let gx = self.mix[l].backward(p, grads, &tape.mix[step], g, true).expect("input grad requested");
            g = resize_axes_backward(&gx, &[1, 2, 3, 4], &tape.mix_upper_dims[step]);
            sq_grads[l] = Some(gx);
        }
        sq_grads[levels - 1] = Some(g);
        for (l, gl) in sq_grads.into_iter().enumerate() {
            let gl = gl.expect("every level receives a gradient");
            self.squeeze[l].backward(p, grads, &tape.squeeze[l], gl, false);
        }
    }

    /// Builds the correlation pyramid for one context/target pair and runs
    /// the network on it.
    pub fn predict_from_features(
        &self,
        context: &FeaturePyramid,
        context_heatmap: &SaliencyHeatmap,
        target: &FeaturePyramid,
    ) -> Result<SaliencyHeatmap> {
        let hcp = mask_and_correlate(context, context_heatmap, target)?;
        Ok(self.forward(&hcp)?.decoded.heatmap)
    }
}

/// One context image with its prompts, both in network input coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub image: &'a Tensor,
    pub prompts: &'a PromptSet,
}

/// End-to-end prediction: encodes each shot's prompts, predicts one heatmap
/// per shot and averages them. Images must already be at the input size.
pub fn predict_heatmap(
    backbone: &Backbone,
    net: &CorrelationNet,
    shots: &[Shot<'_>],
    target_image: &Tensor,
    heatmap_config: &HeatmapConfig,
) -> Result<SaliencyHeatmap> {
    let (h, w) = net.config().input_size;
    let target = extract_feature_pyramid(backbone, target_image, (h, w))?;
    let maps = shots
        .iter()
        .map(|shot| {
            let ctx = extract_feature_pyramid(backbone, shot.image, (h, w))?;
            let g = encode_prompts(&shot.prompts.points(), h, w, heatmap_config)?;
            net.predict_from_features(&ctx, &g, &target)
        })
        .collect::<Result<Vec<_>>>()?;
    average_heatmaps(&maps)
}

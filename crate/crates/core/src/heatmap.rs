//! Point prompts and saliency-like heatmaps.
//!
//! Prompts are encoded as a max-normalized sum of isotropic Gaussians whose
//! width is expressed in image-normalized coordinates, and decoded back into
//! prompts by thresholding, connected-component labeling and moment centroids.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::labeling::{component_moments, label_components};

/// A positive point prompt in pixel coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
}

impl PointPrompt {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < width as f64
            && self.y < height as f64
    }
}

/// Point prompts grouped per object instance.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptSet {
    pub image_id: String,
    pub instances: Vec<Vec<PointPrompt>>,
}

impl PromptSet {
    pub fn new(image_id: impl Into<String>, instances: Vec<Vec<PointPrompt>>) -> Self {
        Self { image_id: image_id.into(), instances }
    }

    /// All points, instance by instance.
    pub fn points(&self) -> Vec<PointPrompt> {
        self.instances.iter().flatten().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.iter().all(|g| g.is_empty())
    }
}

/// Connectivity used when labeling binarized heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Connectivity {
    #[cfg_attr(feature = "serde", serde(rename = "4"))]
    Four,
    #[default]
    #[cfg_attr(feature = "serde", serde(rename = "8"))]
    Eight,
}

impl Connectivity {
    pub(crate) fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(arg_err!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HeatmapConfig {
    /// Gaussian width in image-normalized coordinates.
    pub sigma: f64,
    /// Binarization threshold for peak detection.
    pub tau: f64,
    pub connectivity: Connectivity,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { sigma: 0.02, tau: 0.5, connectivity: Connectivity::Eight }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(alloc::format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(alloc::format!("tau must lie in (0,1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// An `H×W` grid with entries in `[0,1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SaliencyHeatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyHeatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    /// Wraps a raw grid. Entries must already lie in `[0,1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("grid has {} entries, expected {height}x{width}", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(arg_err!("heatmap entry {v} outside [0,1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Wraps an arbitrary non-negative grid, dividing by its maximum.
    pub fn max_normalized(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("grid has {} entries, expected {height}x{width}", data.len()));
        }
        normalize_by_max(&mut data);
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &SaliencyHeatmap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_shape(&self, other: &SaliencyHeatmap) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(dim_err!(
                "heatmap {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ))
        }
    }
}

pub(crate) fn normalize_by_max(data: &mut [f64]) {
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|v| *v /= max);
    }
}

/// Renders point prompts as a max-normalized sum of Gaussians sampled at
/// integer pixel centers.
pub fn encode_prompts(
    points: &[PointPrompt],
    height: usize,
    width: usize,
    config: &HeatmapConfig,
) -> Result<SaliencyHeatmap> {
    if points.is_empty() {
        return Err(Error::EmptyPrompts);
    }
    if height == 0 || width == 0 {
        return Err(dim_err!("heatmap size must be positive, got {height}x{width}"));
    }
    config.validate()?;
    if let Some(p) = points.iter().find(|p| !p.in_bounds(height, width)) {
        return Err(arg_err!("prompt ({}, {}) outside {height}x{width} image", p.x, p.y));
    }

    let two_s2 = 2.0 * config.sigma * config.sigma;
    let mut grid = vec![0.0; height * width];
    let mut gx = vec![0.0; width];
    let mut gy = vec![0.0; height];
    // exp(-(a+b)) = exp(-a)·exp(-b): one row and one column profile per point.
    for p in points {
        for (x, g) in gx.iter_mut().enumerate() {
            let d = (x as f64 - p.x) / width as f64;
            *g = libm::exp(-d * d / two_s2);
        }
        for (y, g) in gy.iter_mut().enumerate() {
            let d = (y as f64 - p.y) / height as f64;
            *g = libm::exp(-d * d / two_s2);
        }
        for (row, &wy) in grid.chunks_exact_mut(width).zip(&gy) {
            if wy == 0.0 {
                continue;
            }
            for (v, &wx) in row.iter_mut().zip(&gx) {
                *v += wy * wx;
            }
        }
    }
    normalize_by_max(&mut grid);
    Ok(SaliencyHeatmap { height, width, data: grid })
}

/// Point prompts recovered from a heatmap.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Peaks {
    pub points: Vec<PointPrompt>,
    /// Set when no pixel reached the threshold and the global argmax was
    /// emitted instead.
    pub fallback: bool,
}

/// Binarizes at `tau`, labels connected components and returns each
/// component's centroid, in scan order of the components' first pixels.
pub fn extract_peaks(heatmap: &SaliencyHeatmap, config: &HeatmapConfig) -> Peaks {
    let (w, h) = (heatmap.width, heatmap.height);
    let mask: Vec<bool> = heatmap.data.iter().map(|&v| v >= config.tau).collect();
    let labels = label_components(&mask, w, h, config.connectivity);
    if labels.count == 0 {
        let mut best = 0;
        for (i, &v) in heatmap.data.iter().enumerate() {
            if v > heatmap.data[best] {
                best = i;
            }
        }
        let point = PointPrompt::new((best % w) as f64, (best / w) as f64);
        return Peaks { points: vec![point], fallback: true };
    }
    let points = component_moments(&labels)
        .iter()
        .map(|m| {
            let (x, y) = m.centroid();
            PointPrompt::new(x, y)
        })
        .collect();
    Peaks { points, fallback: false }
}

/// Element-wise mean of K heatmaps, re-normalized by its maximum.
pub fn average_heatmaps(maps: &[SaliencyHeatmap]) -> Result<SaliencyHeatmap> {
    let first = maps.first().ok_or_else(|| arg_err!("cannot average an empty list of heatmaps"))?;
    for m in &maps[1..] {
        first.check_same_shape(m)?;
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let k = maps.len() as f64;
    let mut data = vec![0.0; first.data.len()];
    for m in maps {
        for (acc, v) in data.iter_mut().zip(&m.data) {
            *acc += v;
        }
    }
    data.iter_mut().for_each(|v| *v /= k);
    normalize_by_max(&mut data);
    // Rounding in the division can leave the maximum a hair above 1.
    data.iter_mut().for_each(|v| *v = v.min(1.0));
    Ok(SaliencyHeatmap { height: first.height, width: first.width, data })
}

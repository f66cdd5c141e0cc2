//! Region IoU, boundary F-measure and their aggregates.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{arg_err, dim_err, Result};

/// A binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("mask has {} entries, expected {height}x{width}", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: alloc::vec![false; height * width] }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(Mask { height: self.height, width: self.width, data })
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(dim_err!(
                "mask {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    /// Foreground pixels with at least one 4-neighbor inside the image that
    /// is background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (w, h) = (self.width, self.height);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = (x > 0 && !self.get(x - 1, y))
                    || (x + 1 < w && !self.get(x + 1, y))
                    || (y > 0 && !self.get(x, y - 1))
                    || (y + 1 < h && !self.get(x, y + 1));
                if edge {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Intersection and union pixel counts.
pub fn overlap(pred: &Mask, gt: &Mask) -> Result<(usize, usize)> {
    pred.check_shape(gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(*p && *g);
        union += usize::from(*p || *g);
    }
    Ok((inter, union))
}

/// `|pred ∧ gt| / |pred ∨ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Boundary tolerance in pixels: 0.8% of the image diagonal, rounded up and
/// at least one pixel.
pub fn default_boundary_tolerance(height: usize, width: usize) -> f64 {
    let diag = libm::sqrt((height * height + width * width) as f64);
    libm::ceil(0.008 * diag).max(1.0)
}

fn matched(from: &[(usize, usize)], to: &[(usize, usize)], tol: f64) -> usize {
    let t2 = tol * tol;
    from.iter()
        .filter(|(x, y)| {
            to.iter().any(|(u, v)| {
                let dx = *x as f64 - *u as f64;
                let dy = *y as f64 - *v as f64;
                dx * dx + dy * dy <= t2
            })
        })
        .count()
}

/// Boundary F-measure: a boundary pixel counts as matched when a boundary
/// pixel of the other mask lies within Euclidean distance `tolerance`.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    pred.check_shape(gt)?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched(&bp, &bg, tolerance) as f64 / bp.len() as f64;
    let recall = matched(&bg, &bp, tolerance) as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Per-frame region and boundary scores of a sequence.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequenceScores {
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_and_f: f64,
    pub tolerance: f64,
}

/// J (IoU), F (boundary F-measure) and their average over aligned frames.
/// `tolerance` defaults to [`default_boundary_tolerance`] of the first frame.
pub fn j_and_f(pred: &[Mask], gt: &[Mask], tolerance: Option<f64>) -> Result<SequenceScores> {
    if pred.len() != gt.len() {
        return Err(dim_err!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len()));
    }
    let first = gt.first().ok_or_else(|| arg_err!("empty frame sequence"))?;
    let tol = tolerance.unwrap_or_else(|| default_boundary_tolerance(first.height, first.width));
    let mut j = Vec::with_capacity(gt.len());
    let mut f = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        j.push(iou(p, g)?);
        f.push(boundary_f(p, g, tol)?);
    }
    let n = gt.len() as f64;
    let j_mean = j.iter().sum::<f64>() / n;
    let f_mean = f.iter().sum::<f64>() / n;
    Ok(SequenceScores { j, f, j_mean, f_mean, j_and_f: (j_mean + f_mean) / 2.0, tolerance: tol })
}

/// Accumulates intersections and unions per class; a class IoU is the ratio
/// of its sums, and mIoU is the mean over classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    sums: BTreeMap<String, (u64, u64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: &str, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = overlap(pred, gt)?;
        let e = self.sums.entry(class.into()).or_insert((0, 0));
        e.0 += i as u64;
        e.1 += u as u64;
        Ok(())
    }

    pub fn per_class(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(c, (i, u))| (c.clone(), if *u == 0 { 1.0 } else { *i as f64 / *u as f64 }))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            return 0.0;
        }
        pc.values().sum::<f64>() / pc.len() as f64
    }
}

/// Scores of one evaluation run.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub per_fold_miou: Vec<f64>,
    pub miou: f64,
    pub j_mean: Option<f64>,
    pub f_mean: Option<f64>,
    pub j_and_f: Option<f64>,
    pub boundary_tolerance: Option<f64>,
    pub fallback_prompts: usize,
    pub episodes: usize,
}

impl MetricReport {
    pub fn from_accumulator(acc: &IouAccumulator) -> Self {
        Self { per_class_iou: acc.per_class(), miou: acc.mean(), ..Self::default() }
    }
}

//! Synthetic few-shot dataset of flat-colored shapes.
//!
//! Every class is a (shape, color) pair. An image holds one object of its
//! class and one distractor object of another class on a gray background.
//! Objects never touch each other or the border, so the mock segmenter
//! recovers each exactly. The prompt is the object pixel nearest its
//! centroid. The first classes go to the training split, the rest to test.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samic_core::metrics::Mask;
use samic_core::{PointPrompt, PromptSet};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestItem, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::io::{save_mask, save_rgb, write_atomic};
use crate::prompts::PromptRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Classes assigned to the test split; the others train.
    pub test_classes: usize,
    pub size: usize,
    pub seed: u64,
    /// Radius range of the target object as a fraction of the image size.
    pub object_radius: (f64, f64),
    /// Same for the distractor, drawn from another class.
    pub distractor_radius: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 10,
            test_classes: 4,
            size: 64,
            seed: 0,
            object_radius: (0.18, 0.26),
            distractor_radius: (0.18, 0.26),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Diamond,
    Triangle,
    Ellipse,
    Cross,
}

const SHAPES: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Diamond, Shape::Triangle, Shape::Ellipse, Shape::Cross];

impl Shape {
    /// Whether offset `(dx, dy)` from the center lies inside at radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Triangle => dy <= 0.7 * r && dy >= -r + 2.0 * dx.abs() * 0.85,
            Shape::Ellipse => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
            Shape::Cross => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
        }
    }
}

/// Saturated, well separated class color from the hue wheel; classes
/// beyond the shape count also alternate brightness.
fn class_color(class: usize, classes: usize) -> [u8; 3] {
    let h = class as f64 / classes as f64 * 6.0;
    let v = if (class / SHAPES.len()) % 2 == 0 { 0.95 } else { 0.7 };
    let c = v * 0.85;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0).round() as u8, ((g + m) * 255.0).round() as u8, ((b + m) * 255.0).round() as u8]
}

fn class_name(c: usize) -> String {
    format!("shape-{c:02}")
}

struct Placed {
    mask: Vec<bool>,
}

fn place(rng: &mut ChaCha8Rng, size: usize, shape: Shape, radius: (f64, f64), taken: &[bool]) -> Option<Placed> {
    for _ in 0..200 {
        let r = rng.random_range(radius.0..radius.1) * size as f64;
        let lo = r + 3.0;
        let hi = size as f64 - r - 3.0;
        let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                mask[y * size + x] = shape.contains(x as f64 - cx, y as f64 - cy, r);
            }
        }
        // Keep a one-pixel gap to anything already drawn.
        let clash = (0..size * size).any(|i| {
            mask[i] && {
                let (x, y) = (i % size, i / size);
                (y.saturating_sub(1)..=(y + 1).min(size - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(size - 1)).any(|xx| taken[yy * size + xx]))
            }
        });
        if !clash && mask.iter().filter(|m| **m).count() >= 12 {
            return Some(Placed { mask });
        }
    }
    None
}

/// The mask pixel nearest the mask's centroid.
pub fn interior_point(mask: &[bool], width: usize) -> PointPrompt {
    let pts: Vec<(f64, f64)> =
        mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| ((i % width) as f64, (i / width) as f64)).collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (x, y) = pts
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = (a.0 - mx).powi(2) + (a.1 - my).powi(2);
            let db = (b.0 - mx).powi(2) + (b.1 - my).powi(2);
            da.total_cmp(&db)
        })
        .expect("placed masks are non-empty");
    PointPrompt::new(x, y)
}

/// Writes `images/`, `masks/`, `prompts/` and `manifest.json` under `out`.
pub fn generate(out: &Path, config: &SynthConfig) -> Result<PathBuf> {
    let radius_ok = |r: (f64, f64)| 0.0 < r.0 && r.0 < r.1 && r.1 < 0.5;
    if !radius_ok(config.object_radius) || !radius_ok(config.distractor_radius) {
        return Err(Error::Config("radius ranges must satisfy 0 < lo < hi < 0.5".into()));
    }
    if config.classes < 2 || config.test_classes >= config.classes || config.per_class < 2 || config.size < 32 {
        return Err(Error::Config("synthetic dataset needs ≥2 classes, ≥1 training class, ≥2 items per class and size ≥32".into()));
    }
    let gateway = Gateway::mock();
    let size = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut items = Vec::new();
    let train_classes = config.classes - config.test_classes;
    for class in 0..config.classes {
        for k in 0..config.per_class {
            let id = format!("{}-{k:03}", class_name(class));
            let gray = rng.random_range(50u8..110);
            let bg = [gray, gray, gray.saturating_add(rng.random_range(0..8))];
            let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb(bg));
            let mut taken = vec![false; size * size];
            let shape = SHAPES[class % SHAPES.len()];
            let obj = place(&mut rng, size, shape, config.object_radius, &taken)
                .ok_or_else(|| Error::Config(format!("could not place an object in a {size}px image")))?;
            taken.iter_mut().zip(&obj.mask).for_each(|(t, m)| *t |= m);
            let mut other = rng.random_range(0..config.classes - 1);
            if other >= class {
                other += 1;
            }
            let distractor = place(&mut rng, size, SHAPES[other % SHAPES.len()], config.distractor_radius, &taken);
            for (placed, c) in [(Some(&obj), class), (distractor.as_ref(), other)] {
                let Some(p) = placed else { continue };
                let color = class_color(c, config.classes);
                for (i, m) in p.mask.iter().enumerate() {
                    if *m {
                        img.put_pixel((i % size) as u32, (i / size) as u32, Rgb(color));
                    }
                }
            }
            let point = interior_point(&obj.mask, size);
            let prompts = PromptSet::new(id.clone(), vec![vec![point]]);
            let seg = gateway.segment_instances(&img, &prompts)?;
            let mask = Mask::new(size, size, obj.mask)?;
            let (ip, mp, pp) = (format!("images/{id}.png"), format!("masks/{id}.png"), format!("prompts/{id}.json"));
            save_rgb(&out.join(&ip), &img)?;
            save_mask(&out.join(&mp), &mask)?;
            let rec = PromptRecord::new(&prompts, (size, size), seg.confidence, gateway.backend_id());
            write_atomic(&out.join(&pp), rec.to_json().as_bytes())?;
            let split = if class < train_classes { "train" } else { "test" };
            items.push(ManifestItem { id, class: class_name(class), split: split.into(), image: ip, prompts: pp, mask: mp });
        }
    }
    let manifest = Manifest { classes: (0..config.classes).map(class_name).collect(), items };
    let path = out.join(MANIFEST_FILE);
    write_atomic(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    Ok(path)
}

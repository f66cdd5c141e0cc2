//! Deterministic stand-in for a foundation segmenter on flat-colored
//! scenes.
//!
//! * A point selects the 4-connected region of pixels whose every channel is
//!   within [`MOCK_COLOR_TOLERANCE`] of the seed pixel's color.
//! * Several points in one group select the union of their regions.
//! * Confidence is `1.01·(1 − e^{−n})` for `n` points, divided by the number
//!   of distinct regions hit, and scaled by [`MOCK_BACKGROUND_FACTOR`] when
//!   every region touches the image border (background).
//! * The embedding is the mean color of each
//!   [`MOCK_EMBED_STRIDE`]`²` block, giving shape `(3, ⌈H/s⌉, ⌈W/s⌉)`.

use image::RgbImage;
use samic_core::metrics::Mask;
use samic_core::PointPrompt;

use super::{Candidate, ImageEmbedding, Segmenter};
use crate::error::Result;

/// Per-channel tolerance in 8-bit levels (1/255 of full scale).
pub const MOCK_COLOR_TOLERANCE: u8 = 1;
pub const MOCK_BACKGROUND_FACTOR: f64 = 0.25;
pub const MOCK_EMBED_STRIDE: usize = 4;

pub fn mock_confidence(n_points: usize) -> f64 {
    1.01 * (1.0 - (-(n_points as f64)).exp())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockSegmenter;

fn close(a: [u8; 3], b: [u8; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= MOCK_COLOR_TOLERANCE)
}

/// Region of `(x, y)`, and whether it touches the border.
fn flood(image: &RgbImage, x: usize, y: usize) -> (Vec<bool>, bool) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let seed = image.get_pixel(x as u32, y as u32).0;
    let mut region = vec![false; w * h];
    let mut border = false;
    let mut stack = vec![(x, y)];
    region[y * w + x] = true;
    while let Some((x, y)) = stack.pop() {
        border |= x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        let mut visit = |nx: usize, ny: usize| {
            let i = ny * w + nx;
            if !region[i] && close(image.get_pixel(nx as u32, ny as u32).0, seed) {
                region[i] = true;
                stack.push((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    (region, border)
}

impl Segmenter for MockSegmenter {
    fn id(&self) -> &str {
        "mock"
    }

    fn embedding_shape(&self, height: usize, width: usize) -> [usize; 3] {
        [3, height.div_ceil(MOCK_EMBED_STRIDE), width.div_ceil(MOCK_EMBED_STRIDE)]
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let [c, eh, ew] = self.embedding_shape(h, w);
        let s = MOCK_EMBED_STRIDE;
        let mut out = vec![0f32; c * eh * ew];
        for by in 0..eh {
            for bx in 0..ew {
                let mut sum = [0u32; 3];
                let mut n = 0u32;
                for y in by * s..((by + 1) * s).min(h) {
                    for x in bx * s..((bx + 1) * s).min(w) {
                        let p = image.get_pixel(x as u32, y as u32).0;
                        for k in 0..3 {
                            sum[k] += u32::from(p[k]);
                        }
                        n += 1;
                    }
                }
                for k in 0..3 {
                    out[(k * eh + by) * ew + bx] = sum[k] as f32 / (255.0 * n as f32);
                }
            }
        }
        Ok(out)
    }

    fn segment(&self, image: &RgbImage, _embedding: &ImageEmbedding, points: &[PointPrompt]) -> Result<Vec<Candidate>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut union = vec![false; w * h];
        let mut regions = 0usize;
        let mut all_border = true;
        for p in points {
            let (x, y) = ((p.x.floor() as usize).min(w - 1), (p.y.floor() as usize).min(h - 1));
            if union[y * w + x] {
                continue;
            }
            let (region, border) = flood(image, x, y);
            union.iter_mut().zip(&region).for_each(|(u, r)| *u |= r);
            regions += 1;
            all_border &= border;
        }
        let mut confidence = mock_confidence(points.len()) / regions as f64;
        if all_border {
            confidence *= MOCK_BACKGROUND_FACTOR;
        }
        Ok(vec![Candidate { mask: Mask::new(h, w, union)?, confidence }])
    }
}

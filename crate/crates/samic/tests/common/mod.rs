#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use samic::dataset::{load_split_manifest, Dataset};
use samic::synth::{generate, SynthConfig};
use samic_core::metrics::Mask;

pub const BACKGROUND: [u8; 3] = [90, 90, 94];

/// Flat background with filled disks `(cx, cy, r, color)`.
pub fn disk_scene(w: u32, h: u32, disks: &[(f64, f64, f64, [u8; 3])]) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, Rgb(BACKGROUND));
    for &(cx, cy, r, c) in disks {
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
    }
    img
}

/// Pixels of `img` equal to `color`.
pub fn color_mask(img: &RgbImage, color: [u8; 3]) -> Mask {
    let bits = img.pixels().map(|p| p.0 == color).collect();
    Mask::new(img.height() as usize, img.width() as usize, bits).unwrap()
}

pub fn save_png(dir: &Path, name: &str, img: &RgbImage) -> PathBuf {
    let p = dir.join(name);
    img.save(&p).unwrap();
    p
}

/// A small synthetic dataset: `classes` classes of `per_class` items, the
/// last `test` classes in the test split.
pub fn small_dataset(dir: &Path, classes: usize, per_class: usize, test: usize, size: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig { classes, per_class, test_classes: test, size, seed, ..SynthConfig::default() };
    let manifest = generate(dir, &cfg).unwrap();
    load_split_manifest(&manifest, None).unwrap()
}

use std::sync::{Arc, Condvar, Mutex};

use samic::gateway::{Candidate, ImageEmbedding, MockSegmenter, Segmenter};

/// The mock backend, except that `embed` blocks until [`Gate::open`].
#[derive(Clone, Default)]
pub struct Gate(Arc<(Mutex<bool>, Condvar)>);

impl Gate {
    pub fn open(&self) {
        *self.0 .0.lock().unwrap() = true;
        self.0 .1.notify_all();
    }
}

pub struct GatedMock(pub Gate);

impl Segmenter for GatedMock {
    fn id(&self) -> &str {
        "mock"
    }

    fn embedding_shape(&self, height: usize, width: usize) -> [usize; 3] {
        MockSegmenter.embedding_shape(height, width)
    }

    fn embed(&self, image: &RgbImage) -> samic::Result<Vec<f32>> {
        let (lock, cv) = &*self.0 .0;
        drop(cv.wait_while(lock.lock().unwrap(), |open| !*open).unwrap());
        MockSegmenter.embed(image)
    }

    fn segment(&self, image: &RgbImage, embedding: &ImageEmbedding, points: &[samic_core::PointPrompt]) -> samic::Result<Vec<Candidate>> {
        MockSegmenter.segment(image, embedding, points)
    }
}

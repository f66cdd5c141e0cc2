//! Uniform access to a promptable segmenter.

mod cache;
mod mock;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use samic_core::kmeans::{kmeans, Clustering};
use samic_core::metrics::Mask;
use samic_core::{PointPrompt, PromptSet};
use serde::{Deserialize, Serialize};

pub use cache::{content_hash, EmbeddingCache};
pub use mock::{mock_confidence, MockSegmenter, MOCK_BACKGROUND_FACTOR, MOCK_COLOR_TOLERANCE, MOCK_EMBED_STRIDE};

use crate::error::{Error, Result};

/// Environment variable that overrides `segmenter.backend`.
pub const BACKEND_ENV: &str = "SAMIC_SEGMENTER_BACKEND";

/// A `C×h×w` feature volume computed by a backend's image encoder. Stored
/// as f32 so that a cached copy is bit-identical to a fresh one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
    pub source: String,
    pub producer: String,
}

/// One candidate mask from a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub mask: Mask,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub mask: Mask,
    /// Ambiguity-aware score; may exceed 1.
    pub confidence: f64,
    pub prompts: PromptSet,
}

/// A promptable segmenter. Implementations must be deterministic.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;

    /// `(C, h, w)` of the embedding produced for an `H×W` image.
    fn embedding_shape(&self, height: usize, width: usize) -> [usize; 3];

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>>;

    /// Candidate masks for one group of points, in any order.
    fn segment(&self, image: &RgbImage, embedding: &ImageEmbedding, points: &[PointPrompt]) -> Result<Vec<Candidate>>;
}

type Factory = Box<dyn Fn() -> Result<Arc<dyn Segmenter>> + Send + Sync>;

/// Backends by name. Only the mock is registered by default; a real
/// backend is added by whoever links one in.
pub struct BackendRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("mock", || Ok(Arc::new(MockSegmenter) as Arc<dyn Segmenter>));
        r
    }
}

impl BackendRegistry {
    pub fn register(&mut self, name: &str, factory: impl Fn() -> Result<Arc<dyn Segmenter>> + Send + Sync + 'static) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    /// Never falls back to another backend when `name` is missing.
    pub fn create(&self, name: &str) -> Result<Arc<dyn Segmenter>> {
        match self.factories.get(name) {
            Some(f) => f(),
            None => Err(Error::BackendUnavailable(name.into())),
        }
    }
}

/// `segmenter.*` configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// `mock` or `external`.
    pub backend: String,
    pub cache_dir: Option<PathBuf>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { backend: "mock".into(), cache_dir: None }
    }
}

impl SegmenterConfig {
    /// Applies the `SAMIC_SEGMENTER_BACKEND` and `SAMIC_CACHE_DIR` overrides.
    pub fn with_env(mut self) -> Self {
        if let Ok(b) = std::env::var(BACKEND_ENV) {
            if !b.is_empty() {
                self.backend = b;
            }
        }
        if let Ok(d) = std::env::var("SAMIC_CACHE_DIR") {
            if !d.is_empty() {
                self.cache_dir = Some(d.into());
            }
        }
        self
    }
}

/// A backend plus its embedding cache.
pub struct Gateway {
    backend: Arc<dyn Segmenter>,
    cache: EmbeddingCache,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Segmenter>, cache: EmbeddingCache) -> Self {
        Self { backend, cache }
    }

    /// Mock backend with an in-memory cache.
    pub fn mock() -> Self {
        Self::new(Arc::new(MockSegmenter), EmbeddingCache::in_memory())
    }

    pub fn from_config(config: &SegmenterConfig, registry: &BackendRegistry) -> Result<Self> {
        let backend = registry.create(&config.backend)?;
        let cache = match &config.cache_dir {
            Some(dir) => EmbeddingCache::on_disk(dir)?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(Self::new(backend, cache))
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// Returns the cached embedding or computes and publishes it.
    pub fn embed_image(&self, image: &RgbImage, source: &str) -> Result<Arc<ImageEmbedding>> {
        self.cache.get_or_compute(self.backend.as_ref(), image, source)
    }

    /// Segments one group of points, keeping the highest-scoring candidate
    /// (the first one on ties).
    pub fn segment(&self, image: &RgbImage, points: &[PointPrompt]) -> Result<SegmentationResult> {
        let (h, w) = (image.height() as usize, image.width() as usize);
        if points.is_empty() {
            return Err(Error::Argument("at least one point is required".into()));
        }
        if let Some(p) = points.iter().find(|p| !p.in_bounds(h, w)) {
            return Err(Error::Argument(format!("point ({}, {}) outside the {h}x{w} image", p.x, p.y)));
        }
        let emb = self.embed_image(image, "")?;
        let cands = self.backend.segment(image, &emb, points)?;
        let best = cands
            .into_iter()
            .reduce(|a, b| if b.confidence > a.confidence { b } else { a })
            .ok_or_else(|| Error::Argument(format!("backend {} returned no mask", self.backend.id())))?;
        if (best.mask.height, best.mask.width) != (h, w) || !best.confidence.is_finite() {
            return Err(Error::Argument(format!("backend {} returned a malformed mask", self.backend.id())));
        }
        Ok(SegmentationResult {
            mask: best.mask,
            confidence: best.confidence,
            prompts: PromptSet::new("", vec![points.to_vec()]),
        })
    }

    /// One `segment` call per instance group; the masks are OR-ed and the
    /// confidence is the minimum over groups.
    pub fn segment_instances(&self, image: &RgbImage, prompts: &PromptSet) -> Result<SegmentationResult> {
        let groups: Vec<&Vec<PointPrompt>> = prompts.instances.iter().collect();
        if groups.is_empty() {
            return Err(Error::Argument("at least one instance group is required".into()));
        }
        let mut mask = Mask::empty(image.height() as usize, image.width() as usize);
        let mut confidence = f64::INFINITY;
        for g in groups {
            let r = self.segment(image, g)?;
            mask = mask.union(&r.mask)?;
            confidence = confidence.min(r.confidence);
        }
        Ok(SegmentationResult { mask, confidence, prompts: prompts.clone() })
    }
}

/// k-means over the spatial positions of an embedding; the assignment map
/// is `h×w`, row-major.
pub fn cluster_embedding(embedding: &ImageEmbedding, n: usize, seed: u64) -> Result<Clustering> {
    let [c, h, w] = embedding.shape;
    if n == 0 || n > h * w {
        return Err(Error::Argument(format!("cluster count {n} outside 1..={}", h * w)));
    }
    let mut points = vec![0.0; h * w * c];
    for k in 0..c {
        for p in 0..h * w {
            points[p * c + k] = f64::from(embedding.data[k * h * w + p]);
        }
    }
    Ok(kmeans(&points, c, n, seed)?)
}

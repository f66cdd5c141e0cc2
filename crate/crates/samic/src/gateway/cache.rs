//! Content-addressed embedding cache.
//!
//! Entries are keyed by a SHA-256 over the producer id, the image size and
//! its pixels, so byte-identical images share an entry whatever their file
//! names. On disk an entry is `<hash>.f32` (raw little-endian f32) plus a
//! `<hash>.json` sidecar; both are published by rename, sidecar last.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageEmbedding, Segmenter};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub fn content_hash(producer: &str, image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(producer.as_bytes());
    h.update([0]);
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    producer: String,
    hash: String,
}

#[derive(Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Arc<ImageEmbedding>>>,
    // Serializes computation so that two callers never embed the same image
    // twice; reads of ready entries do not take it.
    writer: Mutex<()>,
    computed: AtomicUsize,
    hits: AtomicUsize,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: Some(dir.into()), ..Self::default() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Number of embeddings computed by a backend.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Entries currently held in memory.
    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, hash: &str) -> Option<Arc<ImageEmbedding>> {
        self.memory.read().unwrap().get(hash).cloned()
    }

    fn load(&self, dir: &Path, hash: &str, source: &str) -> Result<Option<ImageEmbedding>> {
        let side = dir.join(format!("{hash}.json"));
        if !side.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
        let raw_path = dir.join(format!("{hash}.f32"));
        let raw = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let n: usize = meta.shape.iter().product();
        if raw.len() != 4 * n || meta.hash != hash {
            return Err(Error::format(&raw_path, "cache entry does not match its sidecar"));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Some(ImageEmbedding { shape: meta.shape, data, source: source.into(), producer: meta.producer }))
    }

    fn publish(&self, dir: &Path, hash: &str, emb: &ImageEmbedding) -> Result<()> {
        let raw: Vec<u8> = emb.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&dir.join(format!("{hash}.f32")), &raw)?;
        let side = Sidecar { shape: emb.shape, producer: emb.producer.clone(), hash: hash.into() };
        write_atomic(&dir.join(format!("{hash}.json")), serde_json::to_string(&side).unwrap().as_bytes())
    }

    pub fn get_or_compute(&self, backend: &dyn Segmenter, image: &RgbImage, source: &str) -> Result<Arc<ImageEmbedding>> {
        let hash = content_hash(backend.id(), image);
        if let Some(e) = self.lookup(&hash) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(e);
        }
        let _guard = self.writer.lock().unwrap();
        if let Some(e) = self.lookup(&hash) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(e);
        }
        let emb = match self.dir.as_deref().map(|d| self.load(d, &hash, source)).transpose()?.flatten() {
            Some(e) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                e
            }
            None => {
                let shape = backend.embedding_shape(image.height() as usize, image.width() as usize);
                let data = backend.embed(image)?;
                if data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Argument(format!("backend {} produced a malformed embedding", backend.id())));
                }
                self.computed.fetch_add(1, Ordering::SeqCst);
                let e = ImageEmbedding { shape, data, source: source.into(), producer: backend.id().into() };
                if let Some(d) = &self.dir {
                    self.publish(d, &hash, &e)?;
                }
                e
            }
        };
        let emb = Arc::new(emb);
        self.memory.write().unwrap().insert(hash, emb.clone());
        Ok(emb)
    }
}

//! Episode bookkeeping: per-class subsampling, context/target pairing and
//! early stopping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, cfg_err, Result};

/// Item identifiers grouped by class. Ordered so that iteration, and thus
/// every seeded draw, is reproducible.
pub type ClassIndex = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Subsample {
    pub selected: ClassIndex,
    /// Classes that had no items and were skipped.
    pub skipped: Vec<String>,
}

impl Subsample {
    pub fn len(&self) -> usize {
        self.selected.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        self.selected.values().flatten().map(String::as_str).collect()
    }
}

/// Number of items kept from a class of `n`: `ceil(fraction · n)`. The
/// product is nudged down by a hair so that e.g. `0.1 · 30` keeps 3 items.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    let k = libm::ceil(fraction * n as f64 - 1e-9) as usize;
    k.min(n)
}

/// Keeps `ceil(fraction · n)` items of every class, chosen by a shuffle
/// seeded from `seed` and the class name. Selected ids are returned sorted.
pub fn subsample_training_set(items: &ClassIndex, fraction: f64, seed: u64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(cfg_err!("subsample fraction must lie in (0,1], got {fraction}"));
    }
    let mut out = Subsample::default();
    for (class, ids) in items {
        if ids.is_empty() {
            out.skipped.push(class.clone());
            continue;
        }
        let mut pool = ids.clone();
        pool.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ class_hash(class));
        pool.shuffle(&mut rng);
        pool.truncate(subsample_count(ids.len(), fraction));
        pool.sort();
        out.selected.insert(class.clone(), pool);
    }
    Ok(out)
}

// FNV-1a; only needs to be stable across runs and platforms.
fn class_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// A context/target pair from one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRef {
    pub class: String,
    pub context: String,
    pub target: String,
}

/// Draws episodes uniformly over classes with at least two items, then a
/// context and a distinct target within the class.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    classes: Vec<(String, Vec<String>)>,
    /// Classes dropped because they hold fewer than two items.
    pub skipped: Vec<String>,
}

impl EpisodeSampler {
    pub fn new(index: &ClassIndex) -> Result<Self> {
        let mut classes = Vec::new();
        let mut skipped = Vec::new();
        for (c, ids) in index {
            if ids.len() >= 2 {
                classes.push((c.clone(), ids.clone()));
            } else {
                skipped.push(c.clone());
            }
        }
        if classes.is_empty() {
            return Err(arg_err!("no class has two or more items"));
        }
        Ok(Self { classes, skipped })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> EpisodeRef {
        let (class, ids) = &self.classes[rng.random_range(0..self.classes.len())];
        let c = rng.random_range(0..ids.len());
        let mut t = rng.random_range(0..ids.len() - 1);
        if t >= c {
            t += 1;
        }
        EpisodeRef { class: class.clone(), context: ids[c].clone(), target: ids[t].clone() }
    }

    /// One epoch: every item once as target in shuffled order, each paired
    /// with a random other item of its class as context.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<EpisodeRef> {
        let mut targets: Vec<(usize, usize)> = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(ci, (_, ids))| (0..ids.len()).map(move |i| (ci, i)))
            .collect();
        targets.shuffle(rng);
        targets
            .into_iter()
            .map(|(ci, t)| {
                let (class, ids) = &self.classes[ci];
                let mut c = rng.random_range(0..ids.len() - 1);
                if c >= t {
                    c += 1;
                }
                EpisodeRef { class: class.clone(), context: ids[c].clone(), target: ids[t].clone() }
            })
            .collect()
    }
}

/// Video pairing: frame `t − 1` is the context for frame `t`.
pub fn video_pairs<T: Clone>(frames: &[T]) -> Vec<(T, T)> {
    frames.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

/// The first `k` items of a seeded shuffle of `pool` without `exclude`,
/// used as K-shot contexts.
pub fn kshot_contexts(pool: &[String], exclude: &str, k: usize, seed: u64) -> Vec<String> {
    let mut cands: Vec<String> = pool.iter().filter(|id| *id != exclude).cloned().collect();
    cands.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ class_hash(exclude));
    cands.shuffle(&mut rng);
    cands.truncate(k);
    cands
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the epoch loss has failed to improve on the best by at least
/// `min_delta` for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    epochs: usize,
}

pub const DEFAULT_MIN_DELTA: f64 = 1e-5;

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(cfg_err!("patience must be at least 1"));
        }
        Ok(Self { patience, min_delta: DEFAULT_MIN_DELTA, best: f64::INFINITY, best_epoch: None, epochs: 0 })
    }

    /// Records the loss of the epoch just finished. Returns whether that
    /// epoch set a new best, and whether training should stop.
    pub fn observe(&mut self, loss: f64) -> (bool, StopDecision) {
        let epoch = self.epochs;
        self.epochs += 1;
        let improved = self.best_epoch.is_none() || loss < self.best - self.min_delta;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
        }
        let since = epoch - self.best_epoch.unwrap_or(0);
        let decision = if since >= self.patience { StopDecision::Stop } else { StopDecision::Continue };
        (improved, decision)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs
    }
}

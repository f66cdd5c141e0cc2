//! Dataset manifests:
//!
//! ```text
//! {"classes":[...],"items":[{"id","class","split","image","prompts","mask"}...]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use samic_core::episode::ClassIndex;
use samic_core::metrics::Mask;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_mask, load_rgb};
use crate::prompts::PromptRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub class: String,
    pub split: String,
    pub image: String,
    pub prompts: String,
    pub mask: String,
}

/// Declared class counts per split of a known benchmark layout.
pub fn benchmark_split_classes(id: &str) -> Option<[(&'static str, usize); 3]> {
    match id {
        "fss-1000" => Some([("train", 520), ("val", 240), ("test", 240)]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub class: String,
    pub split: String,
    pub image: PathBuf,
    pub prompts: PathBuf,
    pub mask: PathBuf,
}

/// An item's files, decoded.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub image: RgbImage,
    pub prompts: PromptRecord,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<Item>,
}

/// Loads and validates a manifest (or a directory holding `manifest.json`).
/// Every problem found is reported, not only the first. With a benchmark id
/// the per-split class counts are checked too.
pub fn load_split_manifest(path: &Path, benchmark: Option<&str>) -> Result<Dataset> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::from_manifest(root, manifest, benchmark)
}

impl Dataset {
    pub fn from_manifest(root: PathBuf, manifest: Manifest, benchmark: Option<&str>) -> Result<Self> {
        let mut problems = Vec::new();
        let declared: BTreeSet<&str> = manifest.classes.iter().map(String::as_str).collect();
        if declared.len() != manifest.classes.len() {
            problems.push("class list contains duplicates".to_string());
        }
        let mut ids = BTreeSet::new();
        let mut splits_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut items = Vec::with_capacity(manifest.items.len());
        for it in &manifest.items {
            if !ids.insert(it.id.as_str()) {
                problems.push(format!("duplicate item id {:?}", it.id));
            }
            if !declared.contains(it.class.as_str()) {
                problems.push(format!("item {:?} has undeclared class {:?}", it.id, it.class));
            }
            if !SPLITS.contains(&it.split.as_str()) {
                problems.push(format!("item {:?} has unknown split {:?}", it.id, it.split));
            }
            splits_of.entry(it.class.as_str()).or_default().insert(it.split.as_str());
            let resolve = |p: &str| root.join(p);
            let item = Item {
                id: it.id.clone(),
                class: it.class.clone(),
                split: it.split.clone(),
                image: resolve(&it.image),
                prompts: resolve(&it.prompts),
                mask: resolve(&it.mask),
            };
            for (kind, p) in [("image", &item.image), ("prompts", &item.prompts), ("mask", &item.mask)] {
                if !p.is_file() {
                    problems.push(format!("item {:?}: missing {kind} file {}", it.id, p.display()));
                }
            }
            items.push(item);
        }
        let shared: Vec<String> = splits_of
            .iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(c, s)| format!("{c} ({})", s.iter().copied().collect::<Vec<_>>().join(", ")))
            .collect();
        if !shared.is_empty() {
            problems.push(format!("classes appear in more than one split: {}", shared.join("; ")));
        }
        if let Some(id) = benchmark {
            match benchmark_split_classes(id) {
                None => problems.push(format!("unknown benchmark {id:?}")),
                Some(expected) => {
                    for (split, n) in expected {
                        let got = splits_of.values().filter(|s| s.contains(split)).count();
                        if got != n {
                            problems.push(format!("{id}: {split} split has {got} classes, expected {n}"));
                        }
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Dataset(problems));
        }
        Ok(Self { root, classes: manifest.classes, items })
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn split(&self, split: &str) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Item ids of one split grouped by class.
    pub fn class_index(&self, split: &str) -> ClassIndex {
        let mut idx = ClassIndex::new();
        for it in self.split(split) {
            idx.entry(it.class.clone()).or_default().push(it.id.clone());
        }
        idx
    }

    pub fn load(&self, item: &Item) -> Result<LoadedItem> {
        let image = load_rgb(&item.image)?;
        let prompts = PromptRecord::load(&item.prompts)?;
        let mask = load_mask(&item.mask)?;
        let size = (image.height() as usize, image.width() as usize);
        if (prompts.height(), prompts.width()) != size || (mask.height, mask.width) != size {
            return Err(Error::format(&item.prompts, format!("item {:?}: image, prompts and mask sizes disagree", item.id)));
        }
        Ok(LoadedItem { image, prompts, mask })
    }
}

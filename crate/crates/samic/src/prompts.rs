//! The on-disk prompt record:
//!
//! ```text
//! {"version":1,"image":"<id>","size":[H,W],"instances":[[[x,y],...],...],"confidence":c,"backend":"<id>"}
//! ```
//!
//! `x` is the pixel column and `y` the row. Instance groups and the order of
//! points inside them are kept exactly as recorded.

use std::path::Path;

use samic_core::{PointPrompt, PromptSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub version: u32,
    pub image: String,
    /// `[H, W]` of the annotated image.
    pub size: [usize; 2],
    pub instances: Vec<Vec<[f64; 2]>>,
    pub confidence: f64,
    pub backend: String,
}

impl PromptRecord {
    pub fn new(prompts: &PromptSet, size: (usize, usize), confidence: f64, backend: &str) -> Self {
        Self {
            version: PROMPT_FORMAT_VERSION,
            image: prompts.image_id.clone(),
            size: [size.0, size.1],
            instances: prompts.instances.iter().map(|g| g.iter().map(|p| [p.x, p.y]).collect()).collect(),
            confidence,
            backend: backend.into(),
        }
    }

    pub fn prompt_set(&self) -> PromptSet {
        let instances = self.instances.iter().map(|g| g.iter().map(|[x, y]| PointPrompt::new(*x, *y)).collect()).collect();
        PromptSet::new(self.image.clone(), instances)
    }

    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Checks the version and that every point lies inside the image.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.version != PROMPT_FORMAT_VERSION {
            return Err(format!("unsupported prompt format version {}", self.version));
        }
        for p in self.prompt_set().points() {
            if !p.in_bounds(self.height(), self.width()) {
                return Err(format!("point ({}, {}) outside {}x{}", p.x, p.y, self.height(), self.width()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prompt records always serialize")
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text).map_err(|e| Error::format(path, e))?;
        rec.validate().map_err(|m| Error::format(path, m))?;
        Ok(rec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }
}

/// Rescales prompts between image sizes so that pixel centers map to pixel
/// centers.
pub fn rescale_points(points: &[PointPrompt], from: (usize, usize), to: (usize, usize)) -> Vec<PointPrompt> {
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    points
        .iter()
        .map(|p| {
            let x = ((p.x + 0.5) * sx - 0.5).clamp(0.0, to.1 as f64 - 1.0);
            let y = ((p.y + 0.5) * sy - 0.5).clamp(0.0, to.0 as f64 - 1.0);
            PointPrompt::new(x, y)
        })
        .collect()
}

pub fn rescale_prompt_set(prompts: &PromptSet, from: (usize, usize), to: (usize, usize)) -> PromptSet {
    if from == to {
        return prompts.clone();
    }
    let instances = prompts.instances.iter().map(|g| rescale_points(g, from, to)).collect();
    PromptSet::new(prompts.image_id.clone(), instances)
}

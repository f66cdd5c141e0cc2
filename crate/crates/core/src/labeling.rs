//! Connected-component labeling of binary grids.

use alloc::vec;
use alloc::vec::Vec;

use crate::heatmap::Connectivity;

/// Per-pixel component labels (0 = background, components numbered from 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

/// Labels the foreground of a row-major binary grid.
///
/// Components are numbered in row-major order of their first (topmost, then
/// leftmost) pixel.
pub fn label_components(mask: &[bool], width: usize, height: usize, conn: Connectivity) -> Labels {
    debug_assert_eq!(mask.len(), width * height);
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = ((idx % width) as isize, (idx / width) as isize);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let n = ny as usize * width + nx as usize;
                if mask[n] && labels[n] == 0 {
                    labels[n] = count;
                    stack.push(n);
                }
            }
        }
    }
    Labels { width, height, labels, count: count as usize }
}

/// Raw spatial moments of one component: Σx, Σy and the area.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub m_x: f64,
    pub m_y: f64,
    pub area: f64,
}

impl Moments {
    pub fn centroid(&self) -> (f64, f64) {
        (self.m_x / self.area, self.m_y / self.area)
    }
}

/// Moments of every labeled component, indexed by `label - 1`.
pub fn component_moments(labels: &Labels) -> Vec<Moments> {
    let mut out = vec![Moments::default(); labels.count];
    for (idx, &l) in labels.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let m = &mut out[l as usize - 1];
        m.m_x += (idx % labels.width) as f64;
        m.m_y += (idx / labels.width) as f64;
        m.area += 1.0;
    }
    out
}

//! Instance extraction from probability maps.
//!
//! A map is thresholded into a binary mask, 8-connected components are
//! labeled in raster-scan order of their first pixel, and each instance gets
//! a tight inclusive bounding box. Small components can be filtered out, and
//! box regions can be cropped with centered zero-padding up to a minimum
//! side length (so a tiny instance still fills at least one loss window).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixmap::Pixmap;

/// Inclusive bounding box `(x0, y0, x1, y1)`: both corners are inside the box.
pub type Box4 = (usize, usize, usize, usize);

/// Labeled connected components of a thresholded map.
///
/// Labels are contiguous `1..=n`; `0` is background. Component `k` has its
/// box at `boxes[k - 1]` and pixel count at `areas[k - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSet {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    boxes: Vec<Box4>,
    areas: Vec<usize>,
}

/// Serialized summary of an [`InstanceSet`] (labels are omitted).
#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceSummary {
    /// Number of instances.
    pub n: usize,
    /// Tight inclusive boxes, one per instance in label order.
    pub boxes: Vec<Box4>,
    /// Pixel counts, one per instance in label order.
    pub areas: Vec<usize>,
}

impl InstanceSet {
    /// Number of instances.
    pub fn n(&self) -> usize {
        self.boxes.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Label at `(x, y)`; `0` means background.
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Row-major label buffer.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Tight inclusive boxes in label order.
    pub fn boxes(&self) -> &[Box4] {
        &self.boxes
    }

    /// Pixel counts in label order.
    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    /// Serializable summary (boxes and areas, no label grid).
    pub fn summary(&self) -> InstanceSummary {
        InstanceSummary { n: self.n(), boxes: self.boxes.clone(), areas: self.areas.clone() }
    }

    /// Drops components with `area < min_area` and relabels the survivors
    /// contiguously, preserving their relative order.
    pub fn filter_tiny(&self, min_area: usize) -> InstanceSet {
        let mut remap = vec![0u32; self.boxes.len() + 1];
        let mut boxes = Vec::new();
        let mut areas = Vec::new();
        let mut next = 1u32;
        for (i, (&b, &a)) in self.boxes.iter().zip(&self.areas).enumerate() {
            if a >= min_area {
                remap[i + 1] = next;
                boxes.push(b);
                areas.push(a);
                next += 1;
            }
        }
        let labels = self.labels.iter().map(|&l| remap[l as usize]).collect();
        InstanceSet { width: self.width, height: self.height, labels, boxes, areas }
    }
}

/// Labels 8-connected foreground components of `map >= threshold`.
///
/// Components are numbered `1..=n` in raster-scan order of their first
/// (topmost, then leftmost) pixel, so labeling is deterministic.
pub fn connected_components(map: &Pixmap, threshold: f64) -> InstanceSet {
    let (w, h) = (map.width(), map.height());
    let data = map.data();
    let mut labels = vec![0u32; w * h];
    let mut boxes: Vec<Box4> = Vec::new();
    let mut areas: Vec<usize> = Vec::new();
    let mut queue: Vec<usize> = Vec::new();

    for start in 0..w * h {
        if data[start] < threshold || labels[start] != 0 {
            continue;
        }
        let id = boxes.len() as u32 + 1;
        let (sx, sy) = (start % w, start / w);
        let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
        let mut area = 0usize;

        labels[start] = id;
        queue.clear();
        queue.push(start);
        while let Some(p) = queue.pop() {
            area += 1;
            let (px, py) = (p % w, p / w);
            x0 = x0.min(px);
            y0 = y0.min(py);
            x1 = x1.max(px);
            y1 = y1.max(py);
            // Visit all 8 neighbors inside the frame.
            let ylo = py.saturating_sub(1);
            let yhi = (py + 1).min(h - 1);
            let xlo = px.saturating_sub(1);
            let xhi = (px + 1).min(w - 1);
            for ny in ylo..=yhi {
                for nx in xlo..=xhi {
                    let q = ny * w + nx;
                    if labels[q] == 0 && data[q] >= threshold {
                        labels[q] = id;
                        queue.push(q);
                    }
                }
            }
        }
        boxes.push((x0, y0, x1, y1));
        areas.push(area);
    }

    InstanceSet { width: w, height: h, labels, boxes, areas }
}

/// Offset of the original box content inside a [`crop_padded`] result: the
/// crop places pixel `(x0, y0)` of the box at this `(x, y)`.
pub fn padding_offset(bx: Box4, min_size: usize) -> (usize, usize) {
    let (x0, y0, x1, y1) = bx;
    let cw = x1.saturating_sub(x0) + 1;
    let ch = y1.saturating_sub(y0) + 1;
    ((cw.max(min_size) - cw) / 2, (ch.max(min_size) - ch) / 2)
}

/// Crops `map` to the inclusive box, zero-padding symmetrically so each side
/// is at least `min_size`. The original crop stays centered; when the total
/// padding on an axis is odd, the extra pixel goes to the bottom/right.
pub fn crop_padded(map: &Pixmap, bx: Box4, min_size: usize) -> Result<Pixmap> {
    let (x0, y0, x1, y1) = bx;
    if x1 < x0 || y1 < y0 {
        return Err(Error::validation(format!(
            "degenerate box ({x0}, {y0}, {x1}, {y1}): corners are swapped"
        )));
    }
    if x1 >= map.width() || y1 >= map.height() {
        return Err(Error::validation(format!(
            "box ({x0}, {y0}, {x1}, {y1}) exceeds {}x{} map",
            map.width(),
            map.height()
        )));
    }
    let cw = x1 - x0 + 1;
    let ch = y1 - y0 + 1;
    let ow = cw.max(min_size);
    let oh = ch.max(min_size);
    let (off_x, off_y) = padding_offset(bx, min_size);
    let mut out = Pixmap::zeros(ow, oh)?;
    for y in 0..ch {
        for x in 0..cw {
            out.set(off_x + x, off_y + y, map.get(x0 + x, y0 + y));
        }
    }
    Ok(out)
}

//! Anchors, box offsets, proposals, detections and NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::CellBox;

/// Square anchor of `size` cells at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Anchor {
    pub fn cell_box(&self) -> CellBox {
        CellBox::square(self.x, self.y, self.size)
    }

    /// Tie-break order: `(y1, x1, size)`.
    pub fn key(&self) -> (usize, usize, usize) {
        (self.y, self.x, self.size)
    }
}

/// Every in-bounds square anchor of the given sizes, in `(y1, x1, size)`
/// order.
pub fn anchors(height: usize, width: usize, sizes: &[usize]) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let mut sz: Vec<usize> = sizes.to_vec();
            sz.sort_unstable();
            sz.dedup();
            for size in sz {
                if size > 0 && x + size <= width && y + size <= height {
                    out.push(Anchor { x, y, size });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config {
            field: "model.anchor_sizes".into(),
            reason: format!("no anchor of sizes {sizes:?} fits a {height}x{width} grid"),
        });
    }
    Ok(out)
}

/// Upper bound on `|dw|`, `|dh|` when decoding.
pub const MAX_LOG_SCALE: f64 = 2.772_588_722_239_781; // ln 16

/// `(dx, dy, dw, dh)` taking `reference` to `target`: center shifts divided
/// by the reference size, log size ratios.
pub fn encode(reference: &CellBox, target: &CellBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width() as f64, reference.height() as f64);
    let (tw, th) = (target.width() as f64, target.height() as f64);
    [(tx - rx) / rw, (ty - ry) / rh, (tw / rw).ln(), (th / rh).ln()]
}

/// Inverse of [`encode`], rounded to whole cells and clipped to the grid.
/// The result always covers at least one cell.
pub fn decode(reference: &CellBox, d: &[f64], height: usize, width: usize) -> CellBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width() as f64, reference.height() as f64);
    let cx = rx + d[0] * rw;
    let cy = ry + d[1] * rh;
    let w = rw * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = rh * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let (x1, x2) = snap(cx - w / 2.0, cx + w / 2.0, width);
    let (y1, y2) = snap(cy - h / 2.0, cy + h / 2.0, height);
    CellBox::new(x1, y1, x2, y2)
}

fn snap(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let clip = |v: f64| v.round().clamp(0.0, limit as f64) as usize;
    let (mut a, mut b) = (clip(lo), clip(hi));
    if b <= a {
        if a >= limit {
            a = limit - 1;
        }
        b = a + 1;
    }
    (a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub cell_box: CellBox,
    pub score: f64,
    /// Index of the anchor this proposal came from.
    pub anchor: usize,
}

/// Indices of the `top_k` highest scores; equal scores keep anchor order.
pub fn top_k_anchors(scores: &[f64], anchors: &[Anchor], top_k: usize) -> Result<Vec<usize>> {
    if top_k == 0 {
        return Err(Error::Parameter("top_k must be >= 1".into()));
    }
    if scores.len() != anchors.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} anchors",
            scores.len(),
            anchors.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| anchors[a].key().cmp(&anchors[b].key()))
    });
    idx.truncate(top_k);
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    pub class_id: usize,
    pub cell_box: CellBox,
    pub confidence: f64,
}

impl Detection {
    pub fn is_valid(&self) -> bool {
        self.cell_box.is_valid() && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Greedy NMS over `(box, score)` pairs: repeatedly keeps the best remaining
/// box and drops those overlapping it by more than `iou`. Returns kept
/// indices in descending score order.
pub fn nms(items: &[(CellBox, f64)], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .1
            .partial_cmp(&items[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| items[k].0.iou(&items[i].0) <= iou) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_set_and_order() {
        let a = anchors(4, 4, &[2, 4]).unwrap();
        assert_eq!(a.len(), 9 + 1);
        assert!(a.windows(2).all(|w| w[0].key() < w[1].key()));
        assert_eq!(anchors(16, 16, &[2, 4]).unwrap().len(), 225 + 169);
        assert!(matches!(anchors(3, 3, &[4]), Err(Error::Config { .. })));
    }

    #[test]
    fn offsets_round_trip() {
        let r = CellBox::new(2, 2, 6, 6);
        for t in [CellBox::new(2, 2, 6, 6), CellBox::new(3, 1, 5, 8), CellBox::new(0, 0, 1, 1)] {
            let d = encode(&r, &t);
            assert_eq!(decode(&r, &d, 16, 16), t);
        }
        assert_eq!(encode(&r, &r), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_clips_and_never_collapses() {
        let r = CellBox::new(0, 0, 2, 2);
        let b = decode(&r, &[-5.0, -5.0, -10.0, -10.0], 4, 4);
        assert!(b.fits(4, 4));
        let b = decode(&r, &[9.0, 9.0, 0.0, 0.0], 4, 4);
        assert!(b.fits(4, 4) && b.area() >= 1);
    }

    #[test]
    fn top_k_saturates_and_breaks_ties_lexicographically() {
        let a = anchors(3, 3, &[2]).unwrap();
        let scores = vec![0.5; a.len()];
        assert_eq!(top_k_anchors(&scores, &a, 100).unwrap(), vec![0, 1, 2, 3]);
        let scores = vec![0.1, 0.9, 0.9, 0.3];
        assert_eq!(top_k_anchors(&scores, &a, 2).unwrap(), vec![1, 2]);
        assert!(top_k_anchors(&scores, &a, 0).is_err());
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let items = vec![
            (CellBox::new(0, 0, 4, 4), 0.9),
            (CellBox::new(0, 0, 4, 3), 0.8),
            (CellBox::new(5, 5, 7, 7), 0.7),
            (CellBox::new(0, 0, 2, 2), 0.95),
        ];
        assert_eq!(nms(&items, 0.5), vec![3, 0, 2]);
        assert!(nms(&[], 0.5).is_empty());
    }
}

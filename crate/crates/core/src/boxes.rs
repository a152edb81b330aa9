//! Axis-aligned boxes, IoU, delta encoding and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Upper bound on log-space size deltas before exponentiation.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Per-coordinate weights applied to (dx, dy, dw, dh).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaWeights(pub [f64; 4]);

impl DeltaWeights {
    pub const UNIT: DeltaWeights = DeltaWeights([1.0, 1.0, 1.0, 1.0]);
    pub const HEAD: DeltaWeights = DeltaWeights([10.0, 10.0, 5.0, 5.0]);
}

/// Center/size log-space deltas that move `reference` onto `target`.
pub fn encode(reference: &BBox, target: &BBox, weights: DeltaWeights) -> [f64; 4] {
    let (rw, rh) = (reference.width().max(1e-6), reference.height().max(1e-6));
    let (rx, ry) = reference.center();
    let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
    let (tx, ty) = target.center();
    let w = weights.0;
    [
        w[0] * (tx - rx) / rw,
        w[1] * (ty - ry) / rh,
        w[2] * (tw / rw).ln(),
        w[3] * (th / rh).ln(),
    ]
}

pub fn decode(reference: &BBox, deltas: [f64; 4], weights: DeltaWeights) -> BBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let w = weights.0;
    let dx = deltas[0] / w[0];
    let dy = deltas[1] / w[1];
    let dw = (deltas[2] / w[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / w[3]).min(MAX_LOG_SCALE);
    let cx = rx + dx * rw;
    let cy = ry + dy * rh;
    let half_w = 0.5 * rw * dw.exp();
    let half_h = 0.5 * rh * dh.exp();
    BBox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)
}

/// Total order used everywhere a score ranking is needed: score descending,
/// ties broken by box coordinates so the result never depends on input order.
pub fn rank_order(a: (f64, &BBox), b: (f64, &BBox)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| {
        let (x, y) = (a.1.to_array(), b.1.to_array());
        x.iter()
            .zip(y.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Greedy NMS. Returns indices into `boxes` of kept entries, best first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| rank_order((scores[i], &boxes[i]), (scores[j], &boxes[j])));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() == max_keep {
            break;
        }
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

//! Supervised detection objective: RPN objectness + RPN box regression +
//! head classification + head box regression.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{HeadOutput, RpnOutput};
use crate::boxes::{encode, BBox, DeltaWeights};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, smooth_l1, softplus};
use crate::synthdata::BoxAnnotation;

const RPN_POS_IOU: f64 = 0.5;
const RPN_NEG_IOU: f64 = 0.3;
const RPN_BATCH: usize = 128;
const RPN_POS_FRACTION: f64 = 0.5;
const RPN_BETA: f64 = 1.0 / 9.0;
const HEAD_FG_IOU: f64 = 0.5;
const HEAD_BETA: f64 = 1.0;

/// Sampled anchor labels: 1 positive, 0 negative, -1 ignored.
#[derive(Debug, Clone)]
pub struct RpnTargets {
    pub labels: Vec<i8>,
    pub reg_targets: Vec<[f64; 4]>,
}

impl RpnTargets {
    pub fn new<R: Rng>(anchors: &[BBox], gts: &[BBox], rng: &mut R) -> Self {
        let n = anchors.len();
        let mut labels = vec![-1i8; n];
        let mut reg_targets = vec![[0.0; 4]; n];
        if gts.is_empty() {
            labels.fill(0);
        } else {
            let mut best_for_gt = vec![(f64::NEG_INFINITY, 0usize); gts.len()];
            for (i, a) in anchors.iter().enumerate() {
                let (mut best, mut arg) = (0.0, 0);
                for (g, gt) in gts.iter().enumerate() {
                    let iou = a.iou(gt);
                    if iou > best {
                        best = iou;
                        arg = g;
                    }
                    if iou > best_for_gt[g].0 {
                        best_for_gt[g] = (iou, i);
                    }
                }
                if best >= RPN_POS_IOU {
                    labels[i] = 1;
                    reg_targets[i] = encode(a, &gts[arg], DeltaWeights::UNIT);
                } else if best < RPN_NEG_IOU {
                    labels[i] = 0;
                }
            }
            for (g, &(_, i)) in best_for_gt.iter().enumerate() {
                labels[i] = 1;
                reg_targets[i] = encode(&anchors[i], &gts[g], DeltaWeights::UNIT);
            }
        }
        // Subsample to a fixed budget.
        let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
        let max_pos = (RPN_BATCH as f64 * RPN_POS_FRACTION) as usize;
        if pos.len() > max_pos {
            pos.shuffle(rng);
            for &i in &pos[max_pos..] {
                labels[i] = -1;
            }
            pos.truncate(max_pos);
        }
        let max_neg = RPN_BATCH - pos.len();
        if neg.len() > max_neg {
            neg.shuffle(rng);
            for &i in &neg[max_neg..] {
                labels[i] = -1;
            }
        }
        Self { labels, reg_targets }
    }
}

#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub objectness: f64,
    pub box_reg: f64,
    pub d_logits: Array1<f64>,
    pub d_deltas: Array2<f64>,
}

pub fn rpn_loss(out: &RpnOutput, targets: &RpnTargets) -> RpnLoss {
    let n = out.logits.len();
    let mut d_logits = Array1::zeros(n);
    let mut d_deltas = Array2::zeros((n, 4));
    let sampled = targets.labels.iter().filter(|&&l| l >= 0).count();
    let positives = targets.labels.iter().filter(|&&l| l == 1).count();
    let mut objectness = 0.0;
    let mut box_reg = 0.0;
    for i in 0..n {
        let label = targets.labels[i];
        if label < 0 {
            continue;
        }
        let z = out.logits[i];
        let y = label as f64;
        // BCE from logits: y * softplus(-z) + (1 - y) * softplus(z)
        objectness += y * softplus(-z) + (1.0 - y) * softplus(z);
        d_logits[i] = (sigmoid(z) - y) / sampled as f64;
        if label == 1 {
            for k in 0..4 {
                let (v, g) = smooth_l1(out.deltas[[i, k]] - targets.reg_targets[i][k], RPN_BETA);
                box_reg += v;
                d_deltas[[i, k]] = g / positives as f64;
            }
        }
    }
    RpnLoss {
        objectness: if sampled > 0 { objectness / sampled as f64 } else { 0.0 },
        box_reg: if positives > 0 { box_reg / positives as f64 } else { 0.0 },
        d_logits,
        d_deltas,
    }
}

/// Class column per box: `class_id - 1` when IoU with some ground truth is at
/// least `iou_thresh` (best match wins), else `num_classes` (background).
/// Also returns the index of the matched annotation.
pub fn assign_region_labels(
    boxes: &[BBox],
    annotations: &[BoxAnnotation],
    iou_thresh: f64,
    num_classes: usize,
) -> Vec<(usize, Option<usize>)> {
    boxes
        .iter()
        .map(|b| {
            let best = annotations
                .iter()
                .enumerate()
                .map(|(g, a)| (b.iou(&a.bbox), g))
                .fold((0.0, None), |acc, (iou, g)| if iou > acc.0 { (iou, Some(g)) } else { acc });
            match best {
                (iou, Some(g)) if iou >= iou_thresh => (annotations[g].class_id - 1, Some(g)),
                _ => (num_classes, None),
            }
        })
        .collect()
}

/// Regions sampled for the head on a labeled image.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub boxes: Vec<BBox>,
    /// Class column, `num_classes` = background.
    pub labels: Vec<usize>,
    /// Head-weighted deltas toward the matched ground truth (zero for background).
    pub reg_targets: Vec<[f64; 4]>,
}

/// Mixes ground-truth boxes into the proposals and draws up to `batch`
/// regions, at most a quarter of them foreground.
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    annotations: &[BoxAnnotation],
    num_classes: usize,
    batch: usize,
    rng: &mut R,
) -> RoiSample {
    let mut candidates: Vec<BBox> = proposals.to_vec();
    candidates.extend(annotations.iter().map(|a| a.bbox));
    let assigned = assign_region_labels(&candidates, annotations, HEAD_FG_IOU, num_classes);
    let mut fg: Vec<usize> = (0..candidates.len()).filter(|&i| assigned[i].0 < num_classes).collect();
    let mut bg: Vec<usize> = (0..candidates.len()).filter(|&i| assigned[i].0 == num_classes).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate((batch / 4).max(1));
    bg.truncate(batch.saturating_sub(fg.len()));
    let mut sample = RoiSample {
        boxes: Vec::new(),
        labels: Vec::new(),
        reg_targets: Vec::new(),
    };
    for i in fg.into_iter().chain(bg) {
        let (label, matched) = assigned[i];
        sample.boxes.push(candidates[i]);
        sample.labels.push(label);
        sample.reg_targets.push(match matched {
            Some(g) => encode(&candidates[i], &annotations[g].bbox, DeltaWeights::HEAD),
            None => [0.0; 4],
        });
    }
    sample
}

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub classification: f64,
    pub box_reg: f64,
    pub d_logits: Array2<f64>,
    pub d_deltas: Array3<f64>,
}

pub fn head_loss(out: &HeadOutput, rois: &RoiSample) -> HeadLoss {
    let n = out.len();
    let c = out.box_deltas.dim().1;
    let mut d_logits = out.class_probs.clone();
    let mut d_deltas = Array3::zeros(out.box_deltas.raw_dim());
    let fg = rois.labels.iter().filter(|&&l| l < c).count();
    let mut ce = 0.0;
    let mut box_reg = 0.0;
    for i in 0..n {
        let y = rois.labels[i];
        ce -= out.class_probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        d_logits[[i, y]] -= 1.0;
        if y < c {
            for k in 0..4 {
                let (v, g) = smooth_l1(out.box_deltas[[i, y, k]] - rois.reg_targets[i][k], HEAD_BETA);
                box_reg += v;
                d_deltas[[i, y, k]] = g / fg as f64;
            }
        }
    }
    if n > 0 {
        d_logits /= n as f64;
    }
    HeadLoss {
        classification: if n > 0 { ce / n as f64 } else { 0.0 },
        box_reg: if fg > 0 { box_reg / fg as f64 } else { 0.0 },
        d_logits,
        d_deltas,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossBreakdown {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
}

impl DetLossBreakdown {
    pub fn total(&self) -> f64 {
        self.rpn_objectness + self.rpn_box + self.head_cls + self.head_box
    }
}

/// Combines both stages into `L_det`, rejecting non-finite components.
pub fn detection_loss(
    rpn_out: &RpnOutput,
    rpn_targets: &RpnTargets,
    head_out: &HeadOutput,
    rois: &RoiSample,
) -> Result<(DetLossBreakdown, RpnLoss, HeadLoss)> {
    let rpn = rpn_loss(rpn_out, rpn_targets);
    let head = head_loss(head_out, rois);
    let breakdown = DetLossBreakdown {
        rpn_objectness: rpn.objectness,
        rpn_box: rpn.box_reg,
        head_cls: head.classification,
        head_box: head.box_reg,
    };
    for (name, v) in [
        ("rpn_objectness", breakdown.rpn_objectness),
        ("rpn_box", breakdown.rpn_box),
        ("head_cls", breakdown.head_cls),
        ("head_box", breakdown.head_box),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok((breakdown, rpn, head))
}

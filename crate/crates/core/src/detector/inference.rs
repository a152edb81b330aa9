use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{extract_features, generate_anchors, proposals_from_rpn, rcnn_head, rpn_forward, DetectorConfig, FeatureMap, PoolPlan};
use crate::boxes::{decode, nms, rank_order, BBox, DeltaWeights};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAX_DETECTIONS: usize = 100;

/// Proposals with their pooled features.
#[derive(Debug, Clone)]
pub struct RegionBatch {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
    pub features: Array2<f64>,
}

/// Runs the proposal network on `feat` and pools the top `k_top` regions.
pub fn propose_regions(
    params: &ParamStore,
    cfg: &DetectorConfig,
    feat: &FeatureMap,
    image_size: (usize, usize),
    k_top: usize,
) -> Result<RegionBatch> {
    if k_top == 0 {
        return Err(Error::InvalidArgument("k_top must be at least 1".into()));
    }
    let (out, _) = rpn_forward(params, cfg, feat);
    let anchors = generate_anchors(cfg, feat.height(), feat.width());
    let (boxes, objectness) = proposals_from_rpn(&out, &anchors, image_size.1 as f64, image_size.0 as f64, k_top, cfg);
    let plan = PoolPlan::new(&boxes, (feat.height(), feat.width()), feat.stride, cfg.pool_size, cfg.pool_samples);
    Ok(RegionBatch {
        features: plan.forward(feat),
        boxes,
        objectness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Standard inference: proposals, head, per-class decoding and NMS.
pub fn detect(
    params: &ParamStore,
    cfg: &DetectorConfig,
    pixels: &Array3<f64>,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    for (name, v) in [("score_thresh", score_thresh), ("nms_iou", nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let (h, w, _) = pixels.dim();
    let (feat, _) = extract_features(params, cfg, pixels)?;
    let regions = propose_regions(params, cfg, &feat, (h, w), cfg.test_proposals)?;
    Ok(detect_on_regions(params, cfg, &regions, (h, w), score_thresh, nms_iou))
}

pub(crate) fn detect_on_regions(
    params: &ParamStore,
    cfg: &DetectorConfig,
    regions: &RegionBatch,
    (h, w): (usize, usize),
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    if regions.boxes.is_empty() {
        return Vec::new();
    }
    let (head, _) = rcnn_head(params, cfg, &regions.features);
    let mut dets = Vec::new();
    for c in 0..cfg.num_classes {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, proposal) in regions.boxes.iter().enumerate() {
            let score = head.class_probs[[i, c]];
            if score <= score_thresh {
                continue;
            }
            let d = head.box_deltas.slice(ndarray::s![i, c, ..]);
            let b = decode(proposal, [d[0], d[1], d[2], d[3]], DeltaWeights::HEAD).clip(w as f64, h as f64);
            if b.area() > 0.0 {
                boxes.push(b);
                scores.push(score);
            }
        }
        for k in nms(&boxes, &scores, nms_iou, MAX_DETECTIONS) {
            dets.push(Detection {
                class_id: c + 1,
                bbox: boxes[k],
                score: scores[k],
            });
        }
    }
    dets.sort_by(|a, b| rank_order((a.score, &a.bbox), (b.score, &b.bbox)).then(a.class_id.cmp(&b.class_id)));
    dets.truncate(MAX_DETECTIONS);
    dets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::pool_region_features;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((96, 96, 3), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn proposal_cardinality_and_bounds() {
        let cfg = DetectorConfig::default();
        let p = cfg.init_params(0);
        let img = random_image(0);
        let (feat, _) = extract_features(&p, &cfg, &img).unwrap();
        let one = propose_regions(&p, &cfg, &feat, (96, 96), 1).unwrap();
        assert_eq!(one.boxes.len(), 1);
        assert_eq!(one.features.nrows(), 1);
        let many = propose_regions(&p, &cfg, &feat, (96, 96), 512).unwrap();
        assert!(many.boxes.len() <= 512 && many.boxes.len() > 1);
        assert!(many.boxes.iter().all(|b| b.is_inside(96.0, 96.0)));
        assert!(many.objectness.windows(2).all(|w| w[0] >= w[1]));
        assert!(propose_regions(&p, &cfg, &feat, (96, 96), 0).is_err());
    }

    #[test]
    fn threshold_one_yields_nothing() {
        let cfg = DetectorConfig::default();
        let p = cfg.init_params(0);
        assert!(detect(&p, &cfg, &random_image(1), 1.0, 0.5).unwrap().is_empty());
        assert!(detect(&p, &cfg, &random_image(1), 1.5, 0.5).is_err());
    }

    #[test]
    fn duplicate_regions_collapse_and_order_is_irrelevant() {
        let cfg = DetectorConfig::default();
        let mut p = cfg.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.get_mut("head.cls.w").unwrap().mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        let img = random_image(2);
        let (feat, _) = extract_features(&p, &cfg, &img).unwrap();
        let b = BBox::new(10.0, 10.0, 40.0, 40.0);
        let dup = RegionBatch {
            boxes: vec![b, b],
            objectness: vec![0.9, 0.9],
            features: pool_region_features(&feat, &[b, b], 4, 2),
        };
        let single = RegionBatch {
            boxes: vec![b],
            objectness: vec![0.9],
            features: pool_region_features(&feat, &[b], 4, 2),
        };
        assert_eq!(
            detect_on_regions(&p, &cfg, &dup, (96, 96), 0.0, 0.5),
            detect_on_regions(&p, &cfg, &single, (96, 96), 0.0, 0.5)
        );

        let regions = propose_regions(&p, &cfg, &feat, (96, 96), 60).unwrap();
        let mut order: Vec<usize> = (0..regions.boxes.len()).collect();
        order.reverse();
        order.swap(0, 7);
        let boxes: Vec<BBox> = order.iter().map(|&i| regions.boxes[i]).collect();
        let permuted = RegionBatch {
            features: pool_region_features(&feat, &boxes, 4, 2),
            objectness: order.iter().map(|&i| regions.objectness[i]).collect(),
            boxes,
        };
        let a = detect_on_regions(&p, &cfg, &regions, (96, 96), 0.05, 0.5);
        let b = detect_on_regions(&p, &cfg, &permuted, (96, 96), 0.05, 0.5);
        assert!(!a.is_empty());
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(a.iter().all(|d| (1..=3).contains(&d.class_id)));
    }
}

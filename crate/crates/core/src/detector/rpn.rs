use ndarray::{Array1, Array2, Array3};

use super::{DetectorConfig, FeatureMap};
use crate::boxes::{decode, nms, BBox, DeltaWeights};
use crate::nn::{conv3x3_backward, conv3x3_forward, linear_backward, linear_forward, sigmoid, ConvCache, ParamStore};

/// Anchors for an `h x w` feature grid, ordered `(row * w + col) * A + a`.
pub fn generate_anchors(cfg: &DetectorConfig, h: usize, w: usize) -> Vec<BBox> {
    let s = cfg.stride() as f64;
    let mut out = Vec::with_capacity(h * w * cfg.num_anchors());
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            for &ratio in &cfg.anchor_ratios {
                let aw = cfg.anchor_size / ratio.sqrt();
                let ah = cfg.anchor_size * ratio.sqrt();
                out.push(BBox::new(cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// One logit per anchor.
    pub logits: Array1<f64>,
    /// (num_anchors, 4) deltas relative to each anchor.
    pub deltas: Array2<f64>,
}

impl RpnOutput {
    pub fn scores(&self) -> Array1<f64> {
        self.logits.mapv(sigmoid)
    }
}

pub struct RpnCache {
    conv: ConvCache,
    hidden: Array2<f64>,
    grid: (usize, usize),
}

pub fn rpn_forward(params: &ParamStore, cfg: &DetectorConfig, feat: &FeatureMap) -> (RpnOutput, RpnCache) {
    let (h, w) = (feat.height(), feat.width());
    let a = cfg.num_anchors();
    let (hid, conv) = conv3x3_forward(
        feat.data.view(),
        params.view2("rpn.conv.w"),
        params.view1("rpn.conv.b"),
        1,
        true,
    );
    let hidden = hid.into_shape_with_order((h * w, cfg.rpn_width)).expect("rpn hidden");
    let logits = linear_forward(hidden.view(), params.view2("rpn.cls.w"), params.view1("rpn.cls.b"), false);
    let deltas = linear_forward(hidden.view(), params.view2("rpn.reg.w"), params.view1("rpn.reg.b"), false);
    let out = RpnOutput {
        logits: logits.into_shape_with_order(h * w * a).expect("logits"),
        deltas: deltas.into_shape_with_order((h * w * a, 4)).expect("deltas"),
    };
    (
        out,
        RpnCache {
            conv,
            hidden,
            grid: (h, w),
        },
    )
}

impl RpnCache {
    /// Accumulates RPN parameter gradients; returns the gradient w.r.t. the feature map.
    pub fn backward(
        &self,
        params: &ParamStore,
        cfg: &DetectorConfig,
        d_logits: &Array1<f64>,
        d_deltas: &Array2<f64>,
        grads: &mut ParamStore,
    ) -> Array3<f64> {
        let (h, w) = self.grid;
        let a = cfg.num_anchors();
        let dl = d_logits.view().into_shape_with_order((h * w, a)).expect("d_logits");
        let dd = d_deltas.view().into_shape_with_order((h * w, 4 * a)).expect("d_deltas");
        let (dh1, dw, db) = linear_backward(self.hidden.view(), params.view2("rpn.cls.w"), None, dl);
        grads.accumulate("rpn.cls.w", &dw);
        grads.accumulate("rpn.cls.b", &db);
        let (dh2, dw, db) = linear_backward(self.hidden.view(), params.view2("rpn.reg.w"), None, dd);
        grads.accumulate("rpn.reg.w", &dw);
        grads.accumulate("rpn.reg.b", &db);
        let d_hidden = (dh1 + dh2).into_shape_with_order((h, w, cfg.rpn_width)).expect("d_hidden");
        let (d_feat, dw, db) = conv3x3_backward(&self.conv, params.view2("rpn.conv.w"), &d_hidden);
        grads.accumulate("rpn.conv.w", &dw);
        grads.accumulate("rpn.conv.b", &db);
        d_feat
    }
}

/// Decodes, clips and suppresses RPN outputs; returns at most `k_top`
/// `(box, objectness)` pairs sorted by descending objectness.
pub fn proposals_from_rpn(
    out: &RpnOutput,
    anchors: &[BBox],
    image_w: f64,
    image_h: f64,
    k_top: usize,
    cfg: &DetectorConfig,
) -> (Vec<BBox>, Vec<f64>) {
    let scores = out.scores();
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut kept_scores = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let d = out.deltas.row(i);
        let b = decode(anchor, [d[0], d[1], d[2], d[3]], DeltaWeights::UNIT).clip(image_w, image_h);
        if b.width() >= cfg.min_box_size && b.height() >= cfg.min_box_size && scores[i].is_finite() {
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
    }
    let keep = nms(&boxes, &kept_scores, cfg.rpn_nms_iou, k_top);
    (
        keep.iter().map(|&i| boxes[i]).collect(),
        keep.iter().map(|&i| kept_scores[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::extract_features;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_count_and_centers() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(&cfg, 12, 12);
        assert_eq!(anchors.len(), 12 * 12 * 3);
        let (cx, cy) = anchors[3 * 13 + 1].center();
        assert_eq!((cx, cy), (12.0, 12.0));
        assert!((anchors[1].area() - 24.0 * 24.0).abs() < 1e-9);
    }

    #[test]
    fn rpn_gradients_match_finite_differences() {
        let cfg = DetectorConfig {
            backbone_widths: [4, 4, 6, 6],
            rpn_width: 5,
            ..DetectorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = cfg.init_params(4);
        // Make the output layers non-trivial.
        for name in ["rpn.cls.w", "rpn.reg.w"] {
            p.get_mut(name).unwrap().mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let img = Array3::from_shape_simple_fn((24, 24, 3), || rng.gen_range(0.0..1.0));
        let (feat, _) = extract_features(&p, &cfg, &img).unwrap();
        let (out, cache) = rpn_forward(&p, &cfg, &feat);
        let pl = Array1::from_shape_simple_fn(out.logits.len(), || rng.gen_range(-1.0..1.0));
        let pd = Array2::from_shape_simple_fn(out.deltas.raw_dim(), || rng.gen_range(-1.0..1.0));
        let mut grads = p.zeros_like();
        let d_feat = cache.backward(&p, &cfg, &pl, &pd, &mut grads);
        let objective = |f: &FeatureMap, p: &ParamStore| {
            let (o, _) = rpn_forward(p, &cfg, f);
            (&o.logits * &pl).sum() + (&o.deltas * &pd).sum()
        };
        let dir = Array3::from_shape_simple_fn(feat.data.raw_dim(), || rng.gen_range(-1.0..1.0));
        let analytic = (&d_feat * &dir).sum();
        let mut g = |h: f64| {
            let f = FeatureMap {
                data: &feat.data + &(&dir * h),
                stride: feat.stride,
            };
            objective(&f, &p)
        };
        assert!(rel_err(analytic, central_diff(&mut g, 1e-6)) < 1e-4);
        for name in ["rpn.conv.w", "rpn.cls.w", "rpn.reg.b"] {
            let gt = grads.get(name).unwrap();
            for idx in [0usize, 3] {
                let mut g = |h: f64| {
                    let mut q = p.clone();
                    q.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                    objective(&feat, &q)
                };
                let num = central_diff(&mut g, 1e-6);
                assert!(rel_err(gt.as_slice().unwrap()[idx], num) < 1e-4, "{name}[{idx}]");
            }
        }
    }
}

use ndarray::{Array2, Array3};

use super::{rcnn_head, DetectorConfig, FeatureMap, HeadCache, HeadOutput, PoolPlan};
use crate::boxes::BBox;
use crate::nn::ParamStore;

/// Pooling plus head on a fixed set of boxes, kept for the backward pass.
pub struct RegionPass {
    pub head: HeadOutput,
    /// Pooled region features fed to the head.
    pub features: Array2<f64>,
    plan: PoolPlan,
    head_cache: HeadCache,
    channels: usize,
}

impl RegionPass {
    pub fn forward(params: &ParamStore, cfg: &DetectorConfig, feat: &FeatureMap, boxes: &[BBox]) -> Self {
        let plan = PoolPlan::new(boxes, (feat.height(), feat.width()), feat.stride, cfg.pool_size, cfg.pool_samples);
        let features = plan.forward(feat);
        let (head, head_cache) = rcnn_head(params, cfg, &features);
        Self {
            head,
            features,
            plan,
            head_cache,
            channels: feat.channels(),
        }
    }

    /// Backpropagates head gradients, plus an optional extra gradient arriving
    /// directly at the pooled features, down to the feature map.
    pub fn backward(
        &self,
        params: &ParamStore,
        d_logits: &Array2<f64>,
        d_deltas: &Array3<f64>,
        d_features: Option<&Array2<f64>>,
        grads: &mut ParamStore,
    ) -> Array3<f64> {
        let mut d_pooled = self.head_cache.backward(params, d_logits, d_deltas, grads);
        if let Some(extra) = d_features {
            d_pooled += extra;
        }
        self.plan.backward(&d_pooled, self.channels)
    }
}

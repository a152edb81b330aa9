//! Minimal two-stage detector: a four-stage convolutional backbone, an
//! anchor-based proposal network, bilinear region pooling and a region head
//! with class-specific box refinement.

mod backbone;
mod head;
mod inference;
mod loss;
mod pass;
mod pooling;
mod rpn;

pub use backbone::{extract_features, BackboneCache, FeatureMap};
pub use head::{rcnn_head, HeadCache, HeadOutput};
pub use inference::{detect, propose_regions, Detection, RegionBatch};
pub use loss::{
    assign_region_labels, detection_loss, head_loss, rpn_loss, sample_rois, DetLossBreakdown, HeadLoss, RoiSample,
    RpnLoss, RpnTargets,
};
pub use pass::RegionPass;
pub use pooling::{pool_region_features, PoolPlan};
pub use rpn::{generate_anchors, proposals_from_rpn, rpn_forward, RpnCache, RpnOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{he_normal, normal, zeros, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Channel widths of the four backbone stages; the last is the feature width.
    pub backbone_widths: [usize; 4],
    /// Strides of the four backbone stages; their product is the feature stride.
    pub backbone_strides: [usize; 4],
    pub rpn_width: usize,
    pub anchor_size: f64,
    pub anchor_ratios: Vec<f64>,
    /// Side of the square pooling grid.
    pub pool_size: usize,
    /// Bilinear samples per pooling bin along each axis.
    pub pool_samples: usize,
    pub head_hidden: usize,
    pub rpn_nms_iou: f64,
    /// Proposals kept for the source branch before RoI sampling.
    pub train_proposals: usize,
    /// Proposals scored at inference.
    pub test_proposals: usize,
    pub min_box_size: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_widths: [16, 32, 64, 64],
            backbone_strides: [2, 2, 2, 1],
            rpn_width: 64,
            anchor_size: 24.0,
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pool_size: 4,
            pool_samples: 2,
            head_hidden: 128,
            rpn_nms_iou: 0.7,
            train_proposals: 128,
            test_proposals: 100,
            min_box_size: 2.0,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_widths[3]
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_ratios.len()
    }

    /// Width of a flattened pooled region feature.
    pub fn region_dim(&self) -> usize {
        self.pool_size * self.pool_size * self.feature_dim()
    }

    /// Randomly initialized detector parameters.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in self.backbone_widths.iter().enumerate() {
            p.insert(format!("backbone.conv{}.w", i + 1), he_normal(&mut rng, &[9 * cin, cout], 9 * cin));
            p.insert(format!("backbone.conv{}.b", i + 1), zeros(&[cout]));
            cin = cout;
        }
        let d = self.feature_dim();
        let a = self.num_anchors();
        p.insert("rpn.conv.w", he_normal(&mut rng, &[9 * d, self.rpn_width], 9 * d));
        p.insert("rpn.conv.b", zeros(&[self.rpn_width]));
        p.insert("rpn.cls.w", normal(&mut rng, &[self.rpn_width, a], 0.01));
        p.insert("rpn.cls.b", zeros(&[a]));
        p.insert("rpn.reg.w", normal(&mut rng, &[self.rpn_width, 4 * a], 0.01));
        p.insert("rpn.reg.b", zeros(&[4 * a]));
        let r = self.region_dim();
        let c = self.num_classes;
        p.insert("head.fc1.w", he_normal(&mut rng, &[r, self.head_hidden], r));
        p.insert("head.fc1.b", zeros(&[self.head_hidden]));
        p.insert("head.cls.w", normal(&mut rng, &[self.head_hidden, c + 1], 0.01));
        p.insert("head.cls.b", zeros(&[c + 1]));
        p.insert("head.reg.w", normal(&mut rng, &[self.head_hidden, 4 * c], 0.001));
        p.insert("head.reg.b", zeros(&[4 * c]));
        p
    }
}

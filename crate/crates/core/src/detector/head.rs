use ndarray::{Array2, Array3};

use super::DetectorConfig;
use crate::nn::{linear_backward, linear_forward, softmax_rows, ParamStore};

/// Region head predictions. Column `C` of `class_probs` is background;
/// column `c - 1` is class id `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub class_probs: Array2<f64>,
    /// (N, C, 4) class-specific deltas.
    pub box_deltas: Array3<f64>,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.class_probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct HeadCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

pub fn rcnn_head(params: &ParamStore, cfg: &DetectorConfig, features: &Array2<f64>) -> (HeadOutput, HeadCache) {
    assert_eq!(features.ncols(), cfg.region_dim(), "region feature width");
    let n = features.nrows();
    let hidden = linear_forward(features.view(), params.view2("head.fc1.w"), params.view1("head.fc1.b"), true);
    let logits = linear_forward(hidden.view(), params.view2("head.cls.w"), params.view1("head.cls.b"), false);
    let deltas = linear_forward(hidden.view(), params.view2("head.reg.w"), params.view1("head.reg.b"), false);
    let out = HeadOutput {
        class_probs: softmax_rows(logits.view()),
        box_deltas: deltas
            .into_shape_with_order((n, cfg.num_classes, 4))
            .expect("delta shape"),
    };
    (
        out,
        HeadCache {
            input: features.clone(),
            hidden,
        },
    )
}

impl HeadCache {
    /// Takes gradients w.r.t. the class logits and the deltas; accumulates
    /// parameter gradients and returns the gradient w.r.t. the region features.
    pub fn backward(
        &self,
        params: &ParamStore,
        d_logits: &Array2<f64>,
        d_deltas: &Array3<f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        let n = self.hidden.nrows();
        let (dh1, dw, db) = linear_backward(self.hidden.view(), params.view2("head.cls.w"), None, d_logits.view());
        grads.accumulate("head.cls.w", &dw);
        grads.accumulate("head.cls.b", &db);
        let dd = d_deltas.view().into_shape_with_order((n, d_deltas.len() / n.max(1))).expect("d_deltas");
        let (dh2, dw, db) = linear_backward(self.hidden.view(), params.view2("head.reg.w"), None, dd);
        grads.accumulate("head.reg.w", &dw);
        grads.accumulate("head.reg.b", &db);
        let d_hidden = dh1 + dh2;
        let (dx, dw, db) = linear_backward(
            self.input.view(),
            params.view2("head.fc1.w"),
            Some(self.hidden.view()),
            d_hidden.view(),
        );
        grads.accumulate("head.fc1.w", &dw);
        grads.accumulate("head.fc1.b", &db);
        dx
    }
}

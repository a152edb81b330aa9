use ndarray::Array3;

use super::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::{conv3x3_backward, conv3x3_forward, ConvCache, ParamStore};

/// Backbone output: (h, w, D) at `stride` pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

pub struct BackboneCache {
    layers: Vec<ConvCache>,
}

/// Runs the backbone on an (H, W, 3) image.
pub fn extract_features(
    params: &ParamStore,
    cfg: &DetectorConfig,
    pixels: &Array3<f64>,
) -> Result<(FeatureMap, BackboneCache)> {
    let (h, w, _) = pixels.dim();
    let stride = cfg.stride();
    if h < stride || w < stride {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            stride,
        });
    }
    let mut x = pixels.clone();
    let mut layers = Vec::with_capacity(4);
    for (i, &s) in cfg.backbone_strides.iter().enumerate() {
        let (out, cache) = conv3x3_forward(
            x.view(),
            params.view2(&format!("backbone.conv{}.w", i + 1)),
            params.view1(&format!("backbone.conv{}.b", i + 1)),
            s,
            true,
        );
        layers.push(cache);
        x = out;
    }
    Ok((FeatureMap { data: x, stride }, BackboneCache { layers }))
}

impl BackboneCache {
    /// Accumulates parameter gradients and returns the gradient w.r.t. the image.
    pub fn backward(&self, params: &ParamStore, d_feat: &Array3<f64>, grads: &mut ParamStore) -> Array3<f64> {
        let mut d = d_feat.clone();
        for (i, cache) in self.layers.iter().enumerate().rev() {
            let wname = format!("backbone.conv{}.w", i + 1);
            let (dx, dw, db) = conv3x3_backward(cache, params.view2(&wname), &d);
            grads.accumulate(&wname, &dw);
            grads.accumulate(&format!("backbone.conv{}.b", i + 1), &db);
            d = dx;
        }
        d
    }
}

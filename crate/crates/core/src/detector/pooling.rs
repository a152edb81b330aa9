use ndarray::{Array2, Array3};

use super::FeatureMap;
use crate::boxes::BBox;

/// Sparse bilinear weights mapping feature-map cells to pooled bins. Built
/// once per set of boxes; serves both the forward gather and its adjoint.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    /// Per (region, bin): list of (cell index, weight).
    taps: Vec<Vec<(usize, f64)>>,
    num_regions: usize,
    bins: usize,
    grid: (usize, usize),
}

impl PoolPlan {
    pub fn new(boxes: &[BBox], grid: (usize, usize), stride: usize, pool_size: usize, samples: usize) -> Self {
        let (h, w) = grid;
        let bins = pool_size * pool_size;
        let s = stride as f64;
        let mut taps = Vec::with_capacity(boxes.len() * bins);
        for b in boxes {
            // Half-pixel aligned feature coordinates.
            let (x1, y1) = (b.x1 / s - 0.5, b.y1 / s - 0.5);
            let (x2, y2) = (b.x2 / s - 0.5, b.y2 / s - 0.5);
            if b.x2 - b.x1 <= 0.0 || b.y2 - b.y1 <= 0.0 {
                log::warn!("degenerate box {b:?}: pooling from the nearest cell");
                let cx = (0.5 * (x1 + x2)).round().clamp(0.0, (w - 1) as f64) as usize;
                let cy = (0.5 * (y1 + y2)).round().clamp(0.0, (h - 1) as f64) as usize;
                for _ in 0..bins {
                    taps.push(vec![(cy * w + cx, 1.0)]);
                }
                continue;
            }
            let (bw, bh) = ((x2 - x1) / pool_size as f64, (y2 - y1) / pool_size as f64);
            let norm = 1.0 / (samples * samples) as f64;
            for py in 0..pool_size {
                for px in 0..pool_size {
                    let mut t: Vec<(usize, f64)> = Vec::with_capacity(4 * samples * samples);
                    for sy in 0..samples {
                        let y = (y1 + bh * (py as f64 + (sy as f64 + 0.5) / samples as f64)).clamp(0.0, (h - 1) as f64);
                        for sx in 0..samples {
                            let x = (x1 + bw * (px as f64 + (sx as f64 + 0.5) / samples as f64))
                                .clamp(0.0, (w - 1) as f64);
                            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                            let (yb, xb) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                            let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                            for (cell, wt) in [
                                (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
                                (y0 * w + xb, (1.0 - ly) * lx),
                                (yb * w + x0, ly * (1.0 - lx)),
                                (yb * w + xb, ly * lx),
                            ] {
                                if wt != 0.0 {
                                    t.push((cell, wt * norm));
                                }
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
        Self {
            taps,
            num_regions: boxes.len(),
            bins,
            grid,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    /// (N, bins * D) pooled features.
    pub fn forward(&self, feat: &FeatureMap) -> Array2<f64> {
        let d = feat.channels();
        let data = feat.data.as_standard_layout();
        let src = data.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((self.num_regions, self.bins * d));
        let dst = out.as_slice_mut().expect("fresh array");
        for (k, taps) in self.taps.iter().enumerate() {
            let o = &mut dst[k * d..(k + 1) * d];
            for &(cell, wt) in taps {
                let f = &src[cell * d..(cell + 1) * d];
                for (a, &b) in o.iter_mut().zip(f) {
                    *a += wt * b;
                }
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): scatters pooled gradients onto the map.
    pub fn backward(&self, d_pooled: &Array2<f64>, channels: usize) -> Array3<f64> {
        let (h, w) = self.grid;
        let d = channels;
        let mut out = Array3::<f64>::zeros((h, w, d));
        let dst = out.as_slice_mut().expect("fresh array");
        let g = d_pooled.as_standard_layout();
        let src = g.as_slice().expect("standard layout");
        for (k, taps) in self.taps.iter().enumerate() {
            let gk = &src[k * d..(k + 1) * d];
            for &(cell, wt) in taps {
                for (a, &b) in dst[cell * d..(cell + 1) * d].iter_mut().zip(gk) {
                    *a += wt * b;
                }
            }
        }
        out
    }
}

/// Pools fixed-size features for `boxes` (image coordinates).
pub fn pool_region_features(feat: &FeatureMap, boxes: &[BBox], pool_size: usize, samples: usize) -> Array2<f64> {
    PoolPlan::new(boxes, (feat.height(), feat.width()), feat.stride, pool_size, samples).forward(feat)
}

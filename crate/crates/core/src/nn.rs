//! Named parameter storage and the handful of differentiable layers the
//! detector and the domain bank are built from. Every layer exposes an
//! explicit forward that returns what its backward needs.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Flat, name-addressed collection of `f64` tensors. Used both for weights and
/// for their gradients (same names, same shapes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Panics when `name` is absent; used on hot paths where the name set is
    /// fixed by construction.
    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensor(name).view().into_dimensionality().expect("rank-1 parameter")
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensor(name).view().into_dimensionality().expect("rank-2 parameter")
    }

    fn tensor(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Adds `delta` into the tensor named `name`.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, delta: &ndarray::Array<f64, D>) {
        let t = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let delta = delta.as_standard_layout();
        let delta = delta.view().into_shape_with_order(t.raw_dim()).expect("gradient shape");
        *t += &delta;
    }

    /// Entries whose name starts with `prefix`, keys unchanged.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Errors unless both stores hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for name in self.tensors.keys() {
            if !other.tensors.contains_key(name) {
                return Err(Error::NameMismatch(format!("`{name}` missing on one side")));
            }
        }
        for (name, t) in &other.tensors {
            let Some(mine) = self.tensors.get(name) else {
                return Err(Error::NameMismatch(format!("`{name}` missing on one side")));
            };
            if mine.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: mine.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Output side length of a 3x3, padding-1 convolution.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

pub struct ConvCache {
    cols: Array2<f64>,
    out: Array3<f64>,
    in_shape: (usize, usize, usize),
    stride: usize,
    relu: bool,
}

/// 3x3 convolution with zero padding 1 on an (H, W, C) tensor. `w` is laid
/// out as (9 * C_in, C_out) with row index `(ky * 3 + kx) * C_in + ci`.
pub fn conv3x3_forward(
    input: ArrayView3<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    relu: bool,
) -> (Array3<f64>, ConvCache) {
    let (h, wd, cin) = input.dim();
    let cout = w.ncols();
    assert_eq!(w.nrows(), 9 * cin, "conv weight rows");
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(wd, stride));
    let cols = im2col(input, stride, ho, wo);
    let mut out2 = cols.dot(&w);
    out2 += &b;
    if relu {
        out2.mapv_inplace(|v| v.max(0.0));
    }
    let out = out2.into_shape_with_order((ho, wo, cout)).expect("conv output shape");
    let cache = ConvCache {
        cols,
        out: out.clone(),
        in_shape: (h, wd, cin),
        stride,
        relu,
    };
    (out, cache)
}

/// Returns (d_input, d_w, d_b).
pub fn conv3x3_backward(
    cache: &ConvCache,
    w: ArrayView2<f64>,
    d_out: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (ho, wo, cout) = cache.out.dim();
    let mut dz = d_out.to_owned().into_shape_with_order((ho * wo, cout)).expect("d_out shape");
    if cache.relu {
        let out2 = cache.out.view().into_shape_with_order((ho * wo, cout)).expect("out shape");
        ndarray::Zip::from(&mut dz).and(&out2).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
    }
    let dw = cache.cols.t().dot(&dz);
    let db = dz.sum_axis(Axis(0));
    let dcols = dz.dot(&w.t());
    let d_in = col2im(&dcols, cache.in_shape, cache.stride, ho, wo);
    (d_in, dw, db)
}

fn im2col(input: ArrayView3<f64>, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w, c) = input.dim();
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((ho * wo, 9 * c));
    let dst = cols.as_slice_mut().expect("fresh array");
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * 9 * c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s0 = (iy as usize * w + ix as usize) * c;
                    let d0 = row + (ky * 3 + kx) * c;
                    dst[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    (h, w, c): (usize, usize, usize),
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((h, w, c));
    let dst = out.as_slice_mut().expect("fresh array");
    let src = dcols.as_slice().expect("standard layout");
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * 9 * c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d0 = (iy as usize * w + ix as usize) * c;
                    let s0 = row + (ky * 3 + kx) * c;
                    for k in 0..c {
                        dst[d0 + k] += src[s0 + k];
                    }
                }
            }
        }
    }
    out
}

/// `y = x w + b`, optionally followed by ReLU. Returns the output; the caller
/// keeps `x` (and the output, for the ReLU mask) for the backward pass.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>, relu: bool) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    if relu {
        y.mapv_inplace(|v| v.max(0.0));
    }
    y
}

/// Backward of [`linear_forward`]. `out` is only consulted when `relu` is
/// set. Returns (d_x, d_w, d_b).
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    out: Option<ArrayView2<f64>>,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let mut dz = d_out.to_owned();
    if let Some(out) = out {
        ndarray::Zip::from(&mut dz).and(&out).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
    }
    let dw = x.t().dot(&dz);
    let db = dz.sum_axis(Axis(0));
    let dx = dz.dot(&w.t());
    (dx, dw, db)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: ArrayView2<f64>, d_probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, dp), mut o) in probs.rows().into_iter().zip(d_probs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pi), &dpi) in o.iter_mut().zip(p.iter()).zip(dp.iter()) {
            *o = pi * (dpi - dot);
        }
    }
    out
}

/// Smooth L1 with transition point `beta`; returns (value, derivative).
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Gathers rows `idx` of `x`.
pub fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.slice_mut(s![k, ..]).assign(&x.row(i));
    }
    out
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences, used as the independent oracle for every
    //! hand-written backward pass.

    /// Relative error in the form used by the gradient checks: |a-b| / max(|a|,|b|,floor).
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        (analytic - numeric).abs() / scale
    }

    pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }
}

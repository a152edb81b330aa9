//! Domain Classifier Bank: one binary domain discriminator per object class
//! plus background, trained through a gradient reversal layer, together with
//! the gate functions that decide which discriminators see a region and the
//! entropy weights that feed back into the consistency objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gather_rows, he_normal, linear_backward, linear_forward, normal, sigmoid, softplus, zeros, ParamStore};

pub const NAMESPACE: &str = "dcbank/";

/// Shape of the bank: `num_classifiers` independent two-layer perceptrons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainBank {
    pub num_classifiers: usize,
    pub input_dim: usize,
    pub hidden: usize,
}

impl DomainBank {
    /// One classifier per object class plus background.
    pub fn per_class(num_classes: usize, input_dim: usize, hidden: usize) -> Self {
        Self {
            num_classifiers: num_classes + 1,
            input_dim,
            hidden,
        }
    }

    /// A single class-agnostic discriminator.
    pub fn single(input_dim: usize, hidden: usize) -> Self {
        Self {
            num_classifiers: 1,
            input_dim,
            hidden,
        }
    }

    fn name(i: usize, tensor: &str) -> String {
        format!("{NAMESPACE}{i}/{tensor}")
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for i in 0..self.num_classifiers {
            p.insert(Self::name(i, "fc1.w"), he_normal(&mut rng, &[self.input_dim, self.hidden], self.input_dim));
            p.insert(Self::name(i, "fc1.b"), zeros(&[self.hidden]));
            p.insert(Self::name(i, "fc2.w"), normal(&mut rng, &[self.hidden, 1], 0.01));
            p.insert(Self::name(i, "fc2.b"), zeros(&[1]));
        }
        p
    }

    fn forward_one(&self, params: &ParamStore, i: usize, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let h = linear_forward(x, params.view2(&Self::name(i, "fc1.w")), params.view1(&Self::name(i, "fc1.b")), true);
        let z = linear_forward(h.view(), params.view2(&Self::name(i, "fc2.w")), params.view1(&Self::name(i, "fc2.b")), false);
        (h, z.index_axis_move(Axis(1), 0))
    }

    /// Backward for classifier `i` given d(loss)/d(logit); returns d/dx.
    fn backward_one(
        &self,
        params: &ParamStore,
        i: usize,
        x: ArrayView2<f64>,
        hidden: &Array2<f64>,
        d_logit: &Array1<f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        let dz = d_logit.view().insert_axis(Axis(1));
        let w2 = Self::name(i, "fc2.w");
        let (dh, dw, db) = linear_backward(hidden.view(), params.view2(&w2), None, dz);
        grads.accumulate(&w2, &dw);
        grads.accumulate(&Self::name(i, "fc2.b"), &db);
        let w1 = Self::name(i, "fc1.w");
        let (dx, dw, db) = linear_backward(x, params.view2(&w1), Some(hidden.view()), dh.view());
        grads.accumulate(&w1, &dw);
        grads.accumulate(&Self::name(i, "fc1.b"), &db);
        dx
    }

    fn logits(&self, params: &ParamStore, features: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((features.nrows(), self.num_classifiers));
        for i in 0..self.num_classifiers {
            let (_, z) = self.forward_one(params, i, features);
            out.column_mut(i).assign(&z);
        }
        out
    }
}

/// Gradient reversal, forward half: the identity.
pub fn grl_forward(x: &Array2<f64>) -> Array2<f64> {
    x.clone()
}

/// Gradient reversal, backward half: scales the upstream gradient by `-coeff`.
pub fn grl_backward(upstream: &Array2<f64>, coeff: f64) -> Array2<f64> {
    upstream.mapv(|g| -coeff * g)
}

/// Reversal coefficient schedule `2 / (1 + exp(-10 p)) - 1` over training
/// progress `p` in [0, 1].
pub fn grl_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress.clamp(0.0, 1.0)).exp()) - 1.0
}

/// Domain scores `d` in (0, 1): column `i` is classifier `i` (1 = source).
pub fn domain_scores(params: &ParamStore, bank: &DomainBank, features: &Array2<f64>) -> Array2<f64> {
    bank.logits(params, features.view()).mapv(sigmoid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// One-hot at the argmax (lowest index wins ties).
    G1,
    /// Elementwise power `p^gamma`.
    G2,
}

pub fn gate_g1(p: ArrayView1<f64>) -> Array1<f64> {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    let mut out = Array1::zeros(p.len());
    if !p.is_empty() {
        out[best] = 1.0;
    }
    out
}

pub fn gate_g2(p: ArrayView1<f64>, gamma: f64) -> Result<Array1<f64>> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(p.mapv(|v| v.powf(gamma)))
}

/// Gate weights for every row of `probs`.
pub fn gate_rows(probs: ArrayView2<f64>, gate: Gate, gamma: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(probs.raw_dim());
    for (row, mut o) in probs.rows().into_iter().zip(out.rows_mut()) {
        o.assign(&match gate {
            Gate::G1 => gate_g1(row),
            Gate::G2 => gate_g2(row, gamma)?,
        });
    }
    Ok(out)
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Binary entropy (natural log) of each domain score.
pub fn entropy_weights(scores: ArrayView2<f64>) -> Array2<f64> {
    scores.mapv(|d| -(xlogx(d) + xlogx(1.0 - d)))
}

/// Entropy computed from logits; stays accurate when the sigmoid saturates.
pub fn entropy_from_logits(logits: ArrayView2<f64>) -> Array2<f64> {
    logits.mapv(|z| {
        let s = sigmoid(z);
        s * softplus(-z) + (1.0 - s) * softplus(z)
    })
}

/// Output of the gated bank objective.
#[derive(Debug, Clone)]
pub struct BankLoss {
    pub value: f64,
    pub source_term: f64,
    pub target_term: f64,
    /// Gradient w.r.t. the source features *before* the reversal layer.
    pub d_source_features: Array2<f64>,
    pub d_target_features: Array2<f64>,
    /// All classifier scores on the target regions.
    pub target_scores: Array2<f64>,
    /// All classifier logits on the target regions.
    pub target_logits: Array2<f64>,
    /// Gate-weighted accuracy of the activated classifiers.
    pub accuracy: f64,
}

/// Gated binary cross-entropy of the bank with domain label 1 = source,
/// 0 = target, each domain averaged over its regions. Features pass through
/// the reversal layer with coefficient `grl_coeff`: bank gradients are
/// accumulated into `grads` (scaled by `scale`) while the returned feature
/// gradients are already reversed.
#[allow(clippy::too_many_arguments)]
pub fn bank_loss_with_gates(
    params: &ParamStore,
    bank: &DomainBank,
    source_features: &Array2<f64>,
    source_gates: &Array2<f64>,
    target_features: &Array2<f64>,
    target_gates: &Array2<f64>,
    grl_coeff: f64,
    scale: f64,
    grads: &mut ParamStore,
) -> Result<BankLoss> {
    let (ns, nt) = (source_features.nrows(), target_features.nrows());
    if ns == 0 && nt == 0 {
        return Err(Error::InvalidArgument("bank loss needs at least one region".into()));
    }
    if source_gates.dim() != (ns, bank.num_classifiers) || target_gates.dim() != (nt, bank.num_classifiers) {
        return Err(Error::InvalidArgument("gate matrix shape does not match the bank".into()));
    }
    if !grl_coeff.is_finite() {
        return Err(Error::InvalidArgument("reversal coefficient must be finite".into()));
    }
    let xs = grl_forward(source_features);
    let xt = grl_forward(target_features);
    let mut d_xs = Array2::zeros(xs.raw_dim());
    let mut d_xt = Array2::zeros(xt.raw_dim());
    let mut target_logits = Array2::zeros((nt, bank.num_classifiers));
    let (mut source_term, mut target_term) = (0.0, 0.0);
    let (mut hits, mut mass) = (0.0, 0.0);

    for i in 0..bank.num_classifiers {
        // Source: only rows that activate classifier i.
        let rows: Vec<usize> = (0..ns).filter(|&r| source_gates[[r, i]] > 0.0).collect();
        if !rows.is_empty() {
            let x = gather_rows(xs.view(), &rows);
            let (h, z) = bank.forward_one(params, i, x.view());
            let mut dz = Array1::zeros(rows.len());
            for (k, &r) in rows.iter().enumerate() {
                let g = source_gates[[r, i]];
                source_term += g * softplus(-z[k]);
                dz[k] = g * (sigmoid(z[k]) - 1.0) / ns as f64;
                hits += g * f64::from(u8::from(z[k] > 0.0));
                mass += g;
            }
            let dx = bank.backward_one(params, i, x.view(), &h, &(&dz * scale), grads);
            for (k, &r) in rows.iter().enumerate() {
                let mut row = d_xs.row_mut(r);
                row += &dx.row(k);
            }
        }
        // Target: every row (scores feed the entropy weights).
        if nt > 0 {
            let (h, z) = bank.forward_one(params, i, xt.view());
            target_logits.column_mut(i).assign(&z);
            let active = (0..nt).any(|r| target_gates[[r, i]] > 0.0);
            if active {
                let mut dz = Array1::zeros(nt);
                for r in 0..nt {
                    let g = target_gates[[r, i]];
                    if g > 0.0 {
                        target_term += g * softplus(z[r]);
                        dz[r] = g * sigmoid(z[r]) / nt as f64;
                        hits += g * f64::from(u8::from(z[r] <= 0.0));
                        mass += g;
                    }
                }
                let dx = bank.backward_one(params, i, xt.view(), &h, &(&dz * scale), grads);
                d_xt += &dx;
            }
        }
    }
    if ns > 0 {
        source_term /= ns as f64;
    }
    if nt > 0 {
        target_term /= nt as f64;
    }
    // Gradients w.r.t. features: scale, then reverse.
    let d_source_features = grl_backward(&(d_xs * scale), grl_coeff);
    let d_target_features = grl_backward(&(d_xt * scale), grl_coeff);
    let value = source_term + target_term;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("adversarial"));
    }
    Ok(BankLoss {
        value,
        source_term,
        target_term,
        d_source_features,
        d_target_features,
        target_scores: target_logits.mapv(sigmoid),
        target_logits,
        accuracy: if mass > 0.0 { hits / mass } else { 0.0 },
    })
}

/// The bank objective with source gates from ground-truth class columns and
/// target gates from teacher probabilities.
#[allow(clippy::too_many_arguments)]
pub fn dcbank_loss(
    params: &ParamStore,
    bank: &DomainBank,
    source_features: &Array2<f64>,
    source_labels: &[usize],
    target_features: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    gate: Gate,
    gamma: f64,
    grl_coeff: f64,
    grads: &mut ParamStore,
) -> Result<BankLoss> {
    if source_labels.len() != source_features.nrows() {
        return Err(Error::InvalidArgument("one label per source region required".into()));
    }
    let mut source_gates = Array2::zeros((source_labels.len(), bank.num_classifiers));
    for (r, &y) in source_labels.iter().enumerate() {
        if y >= bank.num_classifiers {
            return Err(Error::InvalidArgument(format!("label column {y} out of range")));
        }
        // G1 and G2 agree on one-hot labels.
        source_gates[[r, y]] = 1.0;
    }
    let target_gates = gate_rows(teacher_probs.view(), gate, gamma)?;
    bank_loss_with_gates(
        params,
        bank,
        source_features,
        &source_gates,
        target_features,
        &target_gates,
        grl_coeff,
        1.0,
        grads,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        let v = Array1::from_shape_simple_fn(n, || -rng.gen_range(1e-12f64..1.0).ln());
        let s = v.sum();
        v / s
    }

    #[test]
    fn grl_forward_identity_and_zero_coeff() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-2.0..2.0));
        assert_eq!(grl_forward(&x), x);
        assert!(grl_backward(&x, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grl_gradient_is_reversed_and_scaled() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Array2<f64> = Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-1.0..1.0));
            let coeff = rng.gen_range(0.0..3.0);
            // L(y) = sum(sin(y) * y)
            let loss = |y: &Array2<f64>| y.mapv(|v| v.sin() * v).sum();
            let dl_dy = x.mapv(|v| v.cos() * v + v.sin());
            let through = grl_backward(&dl_dy, coeff);
            for i in 0..x.len() {
                let mut g = |h: f64| {
                    let mut xp = x.clone();
                    xp.as_slice_mut().unwrap()[i] += h;
                    loss(&grl_forward(&xp))
                };
                let fd = central_diff(&mut g, 1e-6);
                assert!(rel_err(through.as_slice().unwrap()[i], -coeff * fd) < 1e-4);
            }
        }
    }

    #[test]
    fn zero_output_layer_scores_half() {
        let bank = DomainBank::per_class(3, 10, 8);
        let mut p = bank.init_params(0);
        for i in 0..4 {
            p.get_mut(&DomainBank::name(i, "fc2.w")).unwrap().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((6, 10), || rng.gen_range(-1.0..1.0));
        let d = domain_scores(&p, &bank, &x);
        assert_eq!(d.dim(), (6, 4));
        assert!(d.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scores_in_open_interval_and_columns_independent() {
        let bank = DomainBank::per_class(3, 10, 8);
        let p = bank.init_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((6, 10), || rng.gen_range(-1.0..1.0));
        let d = domain_scores(&p, &bank, &x);
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut q = p.clone();
        q.get_mut(&DomainBank::name(2, "fc2.w")).unwrap().mapv_inplace(|v| v + 0.3);
        let d2 = domain_scores(&q, &bank, &x);
        for c in 0..4 {
            if c == 2 {
                assert_ne!(d.column(c), d2.column(c));
            } else {
                assert_eq!(d.column(c), d2.column(c));
            }
        }
        assert_eq!(p.names().filter(|n| n.starts_with(NAMESPACE)).count(), 16);
    }

    #[test]
    fn gate_examples() {
        let p = Array1::from(vec![0.1, 0.7, 0.2]);
        assert_eq!(gate_g1(p.view()), Array1::from(vec![0.0, 1.0, 0.0]));
        let uniform = Array1::from_elem(4, 0.25);
        assert_eq!(gate_g1(uniform.view()), Array1::from(vec![1.0, 0.0, 0.0, 0.0]));
        assert_eq!(gate_g2(p.view(), 1.0).unwrap(), p);
        let half = Array1::from(vec![0.5, 0.5]);
        assert_eq!(gate_g2(half.view(), 2.0).unwrap(), Array1::from(vec![0.25, 0.25]));
        assert!(gate_g2(p.view(), 0.0).is_err());
        assert!(gate_g2(p.view(), -1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let d = Array2::from_shape_vec((1, 3), vec![0.5, 0.9, 0.1]).unwrap();
        let e = entropy_weights(d.view());
        assert!((e[[0, 0]] - 2f64.ln()).abs() < 1e-15);
        assert!((e[[0, 1]] - e[[0, 2]]).abs() < 1e-15);
        let reference = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((e[[0, 1]] - reference).abs() < 1e-15);
        assert!((e[[0, 1]] - 0.3251).abs() < 1e-4);
        let z = Array2::from_shape_vec((1, 3), vec![0.0, 2.0, -40.0]).unwrap();
        let from_logits = entropy_from_logits(z.view());
        let from_scores = entropy_weights(z.mapv(sigmoid).view());
        for (a, b) in from_logits.iter().zip(from_scores.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gate_properties(seed in 0u64..100_000, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_simplex(&mut rng, n);
            let argmax = |v: &Array1<f64>| {
                let mut b = 0;
                for i in 0..v.len() { if v[i] > v[b] { b = i; } }
                b
            };
            let g1 = gate_g1(p.view());
            prop_assert_eq!(g1.sum(), 1.0);
            prop_assert!(g1.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(argmax(&g1), argmax(&p));
            let g2 = gate_g2(p.view(), 2.0).unwrap();
            prop_assert_eq!(argmax(&g2), argmax(&p));
            prop_assert!(g2.iter().zip(p.iter()).all(|(a, b)| a <= b));
            prop_assert!(g2.sum() <= 1.0 + 1e-12);
            prop_assert!(g2.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn entropy_bounds(d in 1e-9f64..(1.0 - 1e-9)) {
            let e = entropy_weights(Array2::from_elem((1, 1), d).view())[[0, 0]];
            let mirror = entropy_weights(Array2::from_elem((1, 1), 1.0 - d).view())[[0, 0]];
            prop_assert!((0.0..=2f64.ln() + 1e-15).contains(&e));
            prop_assert!((e - mirror).abs() < 1e-12);
        }
    }

    fn toy_batch(seed: u64, n: usize, dim: usize, offset: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.gen_range(-1.0..1.0) + offset)
    }

    #[test]
    fn uninformative_bank_gives_two_ln2() {
        let bank = DomainBank::per_class(3, 6, 5);
        let mut p = bank.init_params(0);
        for i in 0..4 {
            p.get_mut(&DomainBank::name(i, "fc2.w")).unwrap().fill(0.0);
        }
        let xs = toy_batch(1, 4, 6, 0.0);
        let xt = toy_batch(2, 5, 6, 0.0);
        let probs = Array2::from_shape_fn((5, 4), |(r, c)| if c == r % 4 { 0.7 } else { 0.1 });
        let mut grads = p.zeros_like();
        let l = dcbank_loss(&p, &bank, &xs, &[0, 1, 2, 3], &xt, &probs, Gate::G1, 2.0, 1.0, &mut grads).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn g1_only_touches_activated_classifier() {
        let bank = DomainBank::per_class(3, 6, 5);
        let p = bank.init_params(3);
        let xs = toy_batch(4, 3, 6, 0.0);
        let xt = toy_batch(5, 3, 6, 0.0);
        // Every region points at classifier 1.
        let probs = Array2::from_shape_fn((3, 4), |(_, c)| if c == 1 { 0.55 } else { 0.15 });
        let mut grads = p.zeros_like();
        dcbank_loss(&p, &bank, &xs, &[1, 1, 1], &xt, &probs, Gate::G1, 2.0, 1.0, &mut grads).unwrap();
        for (name, g) in grads.iter() {
            let touched = g.iter().any(|&v| v != 0.0);
            assert_eq!(touched, name.starts_with("dcbank/1/"), "{name}");
        }
    }

    #[test]
    fn empty_region_sets_rejected() {
        let bank = DomainBank::per_class(3, 6, 5);
        let p = bank.init_params(0);
        let empty = Array2::zeros((0, 6));
        let mut grads = p.zeros_like();
        let r = dcbank_loss(&p, &bank, &empty, &[], &empty, &Array2::zeros((0, 4)), Gate::G2, 2.0, 1.0, &mut grads);
        assert!(r.is_err());
    }

    #[test]
    fn bank_gradients_match_finite_differences() {
        let bank = DomainBank::per_class(2, 5, 4);
        let mut p = bank.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..3 {
            p.get_mut(&DomainBank::name(i, "fc2.w")).unwrap().mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        let xs = toy_batch(8, 3, 5, 0.2);
        let xt = toy_batch(9, 4, 5, -0.2);
        let probs = Array2::from_shape_fn((4, 3), |(r, c)| [0.2, 0.5, 0.3][(r + c) % 3]);
        let labels = [0, 2, 1];
        let value = |p: &ParamStore, xs: &Array2<f64>, xt: &Array2<f64>| {
            let mut g = p.zeros_like();
            dcbank_loss(p, &bank, xs, &labels, xt, &probs, Gate::G2, 2.0, 1.0, &mut g).unwrap().value
        };
        let mut grads = p.zeros_like();
        let l = dcbank_loss(&p, &bank, &xs, &labels, &xt, &probs, Gate::G2, 2.0, 1.0, &mut grads).unwrap();
        for name in ["dcbank/0/fc1.w", "dcbank/2/fc2.w", "dcbank/1/fc1.b"] {
            for idx in [0usize, 3] {
                let mut g = |h: f64| {
                    let mut q = p.clone();
                    q.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                    value(&q, &xs, &xt)
                };
                let num = central_diff(&mut g, 1e-6);
                let a = grads.get(name).unwrap().as_slice().unwrap()[idx];
                assert!(rel_err(a, num) < 1e-4 || (a - num).abs() < 1e-11, "{name}[{idx}] {a} vs {num}");
            }
        }
        // Feature gradients come back reversed.
        for i in 0..xt.len() {
            let mut g = |h: f64| {
                let mut q = xt.clone();
                q.as_slice_mut().unwrap()[i] += h;
                value(&p, &xs, &q)
            };
            let num = central_diff(&mut g, 1e-6);
            let a = l.d_target_features.as_slice().unwrap()[i];
            assert!(rel_err(a, -num) < 1e-4 || (a + num).abs() < 1e-11);
        }
    }

    #[test]
    fn adversarial_directions() {
        let bank = DomainBank::single(4, 8);
        let p = bank.init_params(12);
        let xs = toy_batch(13, 16, 4, 0.8);
        let xt = toy_batch(14, 16, 4, -0.8);
        let gs = Array2::ones((16, 1));
        let gt = Array2::ones((16, 1));
        let eval = |p: &ParamStore, xs: &Array2<f64>, xt: &Array2<f64>| {
            let mut g = p.zeros_like();
            bank_loss_with_gates(p, &bank, xs, &gs, xt, &gt, 1.0, 1.0, &mut g).unwrap()
        };
        let mut grads = p.zeros_like();
        let l0 = bank_loss_with_gates(&p, &bank, &xs, &gs, &xt, &gt, 1.0, 1.0, &mut grads).unwrap();
        let lr = 0.05;
        // Bank descends.
        let mut q = p.clone();
        for (name, t) in q.iter_mut() {
            *t -= &(grads.get(name).unwrap() * lr);
        }
        assert!(eval(&q, &xs, &xt).value < l0.value);
        // Feature generator steps along the reversed gradient and confuses the bank.
        let xs2 = &xs - &(&l0.d_source_features * lr);
        let xt2 = &xt - &(&l0.d_target_features * lr);
        assert!(eval(&p, &xs2, &xt2).value > l0.value);
    }
}

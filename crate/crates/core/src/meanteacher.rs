//! Teacher maintenance (exponential moving average of the student), pseudo
//! labels on target images, proposal sharing and the weighted consistency
//! objective between teacher and student region predictions.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::boxes::BBox;
use crate::detector::{extract_features, propose_regions, rcnn_head, DetectorConfig, HeadOutput, RegionPass};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Hard cap on the number of teacher proposals per target image.
pub const MAX_PSEUDO_PROPOSALS: usize = 512;

#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamStore,
    pub alpha: f64,
    pub initialized_from_student: bool,
}

impl TeacherState {
    /// Teacher starts as an exact copy of the student.
    pub fn from_student(student: &ParamStore, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("EMA factor must lie in [0, 1), got {alpha}")));
        }
        Ok(Self {
            params: student.clone(),
            alpha,
            initialized_from_student: true,
        })
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, parameter by parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore) -> Result<()> {
    teacher.params.check_compatible(student)?;
    let alpha = teacher.alpha;
    for (name, t) in teacher.params.iter_mut() {
        let s = student.get(name)?;
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

/// Teacher proposals on an un-augmented target image with the teacher's head
/// outputs on them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub proposals: Vec<BBox>,
    pub teacher_probs: Array2<f64>,
    pub teacher_deltas: Array3<f64>,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

pub fn teacher_pseudo_labels(
    teacher: &ParamStore,
    cfg: &DetectorConfig,
    pixels: &Array3<f64>,
    k_top: usize,
) -> Result<PseudoBatch> {
    let (h, w, _) = pixels.dim();
    let (feat, _) = extract_features(teacher, cfg, pixels)?;
    let regions = propose_regions(teacher, cfg, &feat, (h, w), k_top.min(MAX_PSEUDO_PROPOSALS))?;
    let (head, _) = rcnn_head(teacher, cfg, &regions.features);
    Ok(PseudoBatch {
        proposals: regions.boxes,
        teacher_probs: head.class_probs,
        teacher_deltas: head.box_deltas,
    })
}

/// Student backbone on the augmented image, head on the teacher's boxes.
/// The returned pass keeps everything needed to backpropagate into the student.
pub struct StudentShared {
    pub pass: RegionPass,
    pub backbone: crate::detector::BackboneCache,
}

impl StudentShared {
    pub fn head(&self) -> &HeadOutput {
        &self.pass.head
    }
}

pub fn student_on_shared_proposals(
    student: &ParamStore,
    cfg: &DetectorConfig,
    augmented: &Array3<f64>,
    proposals: &[BBox],
) -> Result<StudentShared> {
    let (feat, backbone) = extract_features(student, cfg, augmented)?;
    Ok(StudentShared {
        pass: RegionPass::forward(student, cfg, &feat, proposals),
        backbone,
    })
}

/// Consistency value and its gradients w.r.t. the student's probabilities and
/// deltas. Teacher tensors are constants, so no teacher gradient exists.
#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub class_term: f64,
    pub box_term: f64,
    pub d_student_probs: Array2<f64>,
    pub d_student_deltas: Array3<f64>,
}

/// `||e ⊙ (pT - pS)||_2 + ||ẽ ⊙ (bT - bS)||_2`, where `ẽ` weights the 4-tuple
/// of class `c` by `e[:, c]` (the background column has no box).
pub fn consistency_loss(
    teacher_probs: ArrayView2<f64>,
    teacher_deltas: ArrayView3<f64>,
    student_probs: ArrayView2<f64>,
    student_deltas: ArrayView3<f64>,
    weights: ArrayView2<f64>,
) -> Result<ConsistencyLoss> {
    if teacher_probs.dim() != student_probs.dim()
        || teacher_deltas.dim() != student_deltas.dim()
        || weights.dim() != teacher_probs.dim()
        || teacher_deltas.dim().0 != teacher_probs.nrows()
        || teacher_deltas.dim().1 + 1 != teacher_probs.ncols()
    {
        return Err(Error::InvalidArgument("consistency inputs have mismatched shapes".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument("consistency weights must be non-negative".into()));
    }
    if !(teacher_probs.iter().all(|v| v.is_finite())
        && student_probs.iter().all(|v| v.is_finite())
        && teacher_deltas.iter().all(|v| v.is_finite())
        && student_deltas.iter().all(|v| v.is_finite())
        && weights.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFiniteLoss("consistency"));
    }

    let mut cls_residual = Array2::zeros(teacher_probs.raw_dim());
    let mut cls_sq = 0.0;
    ndarray::Zip::from(&mut cls_residual)
        .and(&teacher_probs)
        .and(&student_probs)
        .and(&weights)
        .for_each(|r, &t, &s, &e| {
            *r = e * (t - s);
            cls_sq += *r * *r;
        });
    let class_term = cls_sq.sqrt();

    let (k, c, _) = teacher_deltas.dim();
    let mut box_residual = Array3::zeros(teacher_deltas.raw_dim());
    let mut box_sq = 0.0;
    for r in 0..k {
        for cls in 0..c {
            let e = weights[[r, cls]];
            for j in 0..4 {
                let v = e * (teacher_deltas[[r, cls, j]] - student_deltas[[r, cls, j]]);
                box_residual[[r, cls, j]] = v;
                box_sq += v * v;
            }
        }
    }
    let box_term = box_sq.sqrt();

    // d/dS ||e ⊙ (T - S)|| = -e ⊙ residual / norm; zero at the kink.
    let mut d_student_probs = Array2::zeros(teacher_probs.raw_dim());
    if class_term > 0.0 {
        ndarray::Zip::from(&mut d_student_probs)
            .and(&cls_residual)
            .and(&weights)
            .for_each(|d, &r, &e| *d = -e * r / class_term);
    }
    let mut d_student_deltas = Array3::zeros(teacher_deltas.raw_dim());
    if box_term > 0.0 {
        for r in 0..k {
            for cls in 0..c {
                let e = weights[[r, cls]];
                for j in 0..4 {
                    d_student_deltas[[r, cls, j]] = -e * box_residual[[r, cls, j]] / box_term;
                }
            }
        }
    }
    Ok(ConsistencyLoss {
        value: class_term + box_term,
        class_term,
        box_term,
        d_student_probs,
        d_student_deltas,
    })
}

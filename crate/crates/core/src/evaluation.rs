//! VOC-style average precision, checkpoint evaluation and region-feature
//! embeddings for alignment plots.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{rank_order, BBox};
use crate::checkpoint;
use crate::detector::{assign_region_labels, detect, extract_features, propose_regions, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthdata::{load_manifest, load_split, BoxAnnotation, Domain, ImageSample, Split};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Detections below this score are dropped before AP computation.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.001;
pub const EVAL_NMS_IOU: f64 = 0.5;

/// One detection of a single class, tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    /// Set when the class has no ground truth; AP is then 0 by convention.
    pub no_ground_truth: bool,
    /// Raw (recall, precision) after each ranked detection.
    pub curve: Vec<(f64, f64)>,
}

/// Greedy TP/FP labelling in descending score order: a detection is a true
/// positive when its best-overlapping ground truth in the same image reaches
/// `iou_thresh` and has not been claimed yet.
pub fn match_detections(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<(ScoredBox, bool)> {
    let mut order: Vec<&ScoredBox> = dets.iter().collect();
    order.sort_by(|a, b| rank_order((a.score, &a.bbox), (b.score, &b.bbox)).then(a.image.cmp(&b.image)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|d| {
            let image_gts = gts.get(d.image).map(Vec::as_slice).unwrap_or(&[]);
            let mut best = (f64::NEG_INFINITY, None);
            for (g, gt) in image_gts.iter().enumerate() {
                let iou = d.bbox.iou(gt);
                if iou > best.0 {
                    best = (iou, Some(g));
                }
            }
            let tp = match best {
                (iou, Some(g)) if iou >= iou_thresh && !claimed[d.image][g] => {
                    claimed[d.image][g] = true;
                    true
                }
                _ => false,
            };
            (*d, tp)
        })
        .collect()
}

/// All-points interpolated AP for one class.
pub fn average_precision(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f64) -> ClassAp {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let matched = match_detections(dets, gts, iou_thresh);
    let mut curve = Vec::with_capacity(matched.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &matched {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    let ap = if num_gt == 0 {
        0.0
    } else {
        let mut rec = vec![0.0];
        let mut prec = vec![0.0];
        for &(r, p) in &curve {
            rec.push(r);
            prec.push(p);
        }
        rec.push(1.0);
        prec.push(0.0);
        for i in (0..prec.len() - 1).rev() {
            prec[i] = prec[i].max(prec[i + 1]);
        }
        (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
    };
    ClassAp {
        ap,
        num_detections: dets.len(),
        num_ground_truth: num_gt,
        no_ground_truth: num_gt == 0,
        curve,
    }
}

/// Detection in image-independent form for AP computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Per-class AP over a set of images. `detections[i]` and `ground_truth[i]`
/// belong to image `i`; class ids run from 1 to `num_classes`.
pub fn voc_ap(
    detections: &[Vec<ImageDetection>],
    ground_truth: &[Vec<BoxAnnotation>],
    num_classes: usize,
    iou_thresh: f64,
) -> BTreeMap<usize, ClassAp> {
    (1..=num_classes)
        .map(|c| {
            let dets: Vec<ScoredBox> = detections
                .iter()
                .enumerate()
                .flat_map(|(image, ds)| {
                    ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox {
                        image,
                        score: d.score,
                        bbox: d.bbox,
                    })
                })
                .collect();
            let gts: Vec<Vec<BBox>> = ground_truth
                .iter()
                .map(|g| g.iter().filter(|a| a.class_id == c).map(|a| a.bbox).collect())
                .collect();
            (c, average_precision(&dets, &gts, iou_thresh))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub detections: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub num_images: usize,
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean of `per_class_ap` over classes that have ground truth.
    pub map: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub pr_curves: BTreeMap<usize, Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn from_class_ap(split: Split, num_images: usize, aps: BTreeMap<usize, ClassAp>) -> Self {
        let present: Vec<f64> = aps.values().filter(|a| !a.no_ground_truth).map(|a| a.ap).collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            split,
            num_images,
            per_class_ap: aps.iter().map(|(&c, a)| (c, a.ap)).collect(),
            map,
            counts: aps
                .iter()
                .map(|(&c, a)| {
                    (
                        c,
                        ClassCounts {
                            detections: a.num_detections,
                            ground_truth: a.num_ground_truth,
                        },
                    )
                })
                .collect(),
            pr_curves: aps.into_iter().map(|(c, a)| (c, a.curve)).collect(),
        }
    }
}

/// Runs the detector over labeled images and scores the result.
pub fn evaluate_params(
    params: &ParamStore,
    cfg: &DetectorConfig,
    images: &[ImageSample],
    split: Split,
) -> Result<EvalReport> {
    let mut detections = Vec::with_capacity(images.len());
    let mut gts = Vec::with_capacity(images.len());
    for img in images {
        let ann = img
            .annotations
            .clone()
            .ok_or_else(|| Error::Dataset(format!("{} has no annotations to evaluate against", img.sample_id)))?;
        gts.push(ann);
        detections.push(
            detect(params, cfg, &img.pixels, EVAL_SCORE_THRESHOLD, EVAL_NMS_IOU)?
                .into_iter()
                .map(|d| ImageDetection {
                    class_id: d.class_id,
                    score: d.score,
                    bbox: d.bbox,
                })
                .collect(),
        );
    }
    let aps = voc_ap(&detections, &gts, cfg.num_classes, IOU_THRESHOLD);
    Ok(EvalReport::from_class_ap(split, images.len(), aps))
}

pub fn evaluate_checkpoint(checkpoint_path: &Path, dataset_root: &Path, split: Split) -> Result<EvalReport> {
    if !split.labeled() {
        return Err(Error::Dataset(format!("split {} has no annotations", split.dir_name())));
    }
    let ckpt = checkpoint::load(checkpoint_path)?;
    let manifest = load_manifest(dataset_root)?;
    if manifest.num_classes != ckpt.detector.num_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: ckpt.detector.num_classes,
            dataset: manifest.num_classes,
        });
    }
    let params = ckpt.detector_params()?;
    let images = load_split(dataset_root, split)?;
    evaluate_params(&params, &ckpt.detector, &images, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub x: f64,
    pub y: f64,
    pub domain: Domain,
    /// Matched ground-truth class, 0 for background regions.
    pub class_id: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone)]
pub struct Embeddings {
    pub rows: Vec<EmbeddingRow>,
    /// Pooled features behind each row, before projection.
    pub features: Array2<f64>,
}

/// Domain, class label and image id of one pooled region.
type RegionMeta = (Domain, usize, String);

/// Pooled features of the top `regions_per_image` proposals of every image,
/// labelled by IoU matching against ground truth.
pub fn region_features(
    params: &ParamStore,
    cfg: &DetectorConfig,
    images: &[ImageSample],
    regions_per_image: usize,
) -> Result<(Vec<RegionMeta>, Array2<f64>)> {
    let mut meta = Vec::new();
    let mut feats = Vec::new();
    for img in images {
        let (feat, _) = extract_features(params, cfg, &img.pixels)?;
        let regions = propose_regions(params, cfg, &feat, (img.height(), img.width()), regions_per_image)?;
        let ann = img.annotations.as_deref().unwrap_or(&[]);
        let labels = assign_region_labels(&regions.boxes, ann, IOU_THRESHOLD, cfg.num_classes);
        for (r, (col, _)) in labels.iter().enumerate() {
            let class_id = if *col == cfg.num_classes { 0 } else { col + 1 };
            meta.push((img.domain, class_id, img.sample_id.clone()));
            feats.extend(regions.features.row(r).iter().copied());
        }
    }
    let features = Array2::from_shape_vec((meta.len(), cfg.region_dim()), feats)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((meta, features))
}

/// Two leading principal directions of the z-scored features by seeded power
/// iteration with deflation.
pub fn project_2d(features: &Array2<f64>, seed: u64) -> Array2<f64> {
    let n = features.nrows();
    if n == 0 {
        return Array2::zeros((0, 2));
    }
    let mean = features.mean_axis(Axis(0)).expect("rows");
    let std = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (features - &mean) / &std;
    let cov = z.t().dot(&z) / n as f64;
    let d = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v = Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0));
        for _ in 0..200 {
            for b in &basis {
                let proj = v.dot(b);
                v.scaled_add(-proj, b);
            }
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = next / norm;
        }
        // Fix the sign so the output does not flip between runs.
        let pivot = v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        basis.push(v);
    }
    let mut out = Array2::zeros((n, 2));
    for (k, b) in basis.iter().enumerate() {
        out.column_mut(k).assign(&z.dot(b));
    }
    out
}

/// Region embeddings from a checkpoint on the first `max_images` images of the
/// source and target-eval splits.
pub fn dump_embeddings(
    checkpoint_path: &Path,
    dataset_root: &Path,
    regions_per_image: usize,
    max_images: usize,
    seed: u64,
) -> Result<Embeddings> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let params = ckpt.detector_params()?;
    let mut images = Vec::new();
    for split in [Split::Source, Split::TargetEval] {
        images.extend(load_split(dataset_root, split)?.into_iter().take(max_images));
    }
    embeddings_for(&params, &ckpt.detector, &images, regions_per_image, seed)
}

pub fn embeddings_for(
    params: &ParamStore,
    cfg: &DetectorConfig,
    images: &[ImageSample],
    regions_per_image: usize,
    seed: u64,
) -> Result<Embeddings> {
    let (meta, features) = region_features(params, cfg, images, regions_per_image)?;
    let xy = project_2d(&features, seed);
    let rows = meta
        .into_iter()
        .enumerate()
        .map(|(i, (domain, class_id, sample_id))| EmbeddingRow {
            x: xy[[i, 0]],
            y: xy[[i, 1]],
            domain,
            class_id,
            sample_id,
        })
        .collect();
    Ok(Embeddings { rows, features })
}

/// Mean over foreground classes seen in both domains of the distance between
/// the class's source and target feature centroids, divided by the RMS
/// distance of all foreground features to their overall mean. Lower means the
/// domains are better aligned class by class. `None` if no class is shared.
pub fn cross_domain_distance(emb: &Embeddings) -> Option<f64> {
    let fg: Vec<usize> = (0..emb.rows.len()).filter(|&i| emb.rows[i].class_id > 0).collect();
    if fg.is_empty() {
        return None;
    }
    let dim = emb.features.ncols();
    let mut sums: BTreeMap<(usize, Domain), (Array1<f64>, usize)> = BTreeMap::new();
    let mut global = Array1::zeros(dim);
    for &i in &fg {
        let row = emb.features.row(i);
        let e = sums
            .entry((emb.rows[i].class_id, emb.rows[i].domain))
            .or_insert_with(|| (Array1::zeros(dim), 0));
        e.0 += &row;
        e.1 += 1;
        global += &row;
    }
    global /= fg.len() as f64;
    let spread = (fg
        .iter()
        .map(|&i| {
            let d = &emb.features.row(i) - &global;
            d.dot(&d)
        })
        .sum::<f64>()
        / fg.len() as f64)
        .sqrt();
    if spread <= 0.0 {
        return Some(0.0);
    }
    let classes: Vec<usize> = sums.keys().map(|k| k.0).collect();
    let mut dists = Vec::new();
    for c in classes.into_iter().collect::<std::collections::BTreeSet<_>>() {
        if let (Some(s), Some(t)) = (sums.get(&(c, Domain::Source)), sums.get(&(c, Domain::Target))) {
            let d = &s.0 / s.1 as f64 - &t.0 / t.1 as f64;
            dists.push(d.dot(&d).sqrt() / spread);
        }
    }
    (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64)
}

//! Synthetic two-domain detection benchmark.
//!
//! Scenes hold up to six flat-shaded shapes (circle, square, triangle) on a
//! plain or gradient background. The source domain is the clean rendering;
//! the target domain is the same rendering pushed through fog, a hue rotation
//! and additive Gaussian noise. Geometry never changes between domains, so
//! source-style annotations stay valid for target images.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const DEFAULT_NUM_CLASSES: usize = 3;
pub const DEFAULT_IMAGE_SIZE: usize = 96;
pub const MAX_OBJECTS: usize = 6;
/// Scenes whose object boxes overlap more than this are rejected.
pub const MAX_OVERLAP_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle = 1,
    Square = 2,
    Triangle = 3,
}

impl ShapeClass {
    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            1 => Some(Self::Circle),
            2 => Some(Self::Square),
            3 => Some(Self::Triangle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    Flat,
    HorizontalGradient,
    VerticalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub center: (f64, f64),
    /// Diameter of the circumscribed circle, in pixels.
    pub size: f64,
    /// Rotation in radians.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub objects: Vec<SceneObject>,
    pub background_style: BackgroundStyle,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// (H, W, 3), values in [0, 1].
    pub pixels: Array3<f64>,
    pub domain: Domain,
    pub annotations: Option<Vec<BoxAnnotation>>,
    pub sample_id: String,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Drops annotations, as done for the unlabeled target split.
    pub fn without_annotations(mut self) -> Self {
        self.annotations = None;
        self
    }
}

/// Photometric parameters of the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Blend weight toward `fog_color`.
    pub fog_density: f64,
    pub fog_color: [f64; 3],
    pub hue_shift_deg: f64,
    pub noise_std: f64,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            fog_density: 0.6,
            fog_color: [0.72, 0.74, 0.78],
            hue_shift_deg: 120.0,
            noise_std: 0.04,
        }
    }
}

impl SceneObject {
    fn vertices(&self, class: ShapeClass) -> Vec<(f64, f64)> {
        let r = 0.5 * self.size;
        let (cx, cy) = self.center;
        let corners = match class {
            ShapeClass::Circle => return Vec::new(),
            ShapeClass::Square => 4,
            ShapeClass::Triangle => 3,
        };
        (0..corners)
            .map(|k| {
                let t = self.angle + std::f64::consts::TAU * k as f64 / corners as f64;
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect()
    }

    /// Tight axis-aligned box of the shape.
    pub fn tight_box(&self) -> Result<BBox> {
        let class = ShapeClass::from_id(self.class_id)
            .ok_or_else(|| Error::InvalidScene(format!("unknown class id {}", self.class_id)))?;
        let (cx, cy) = self.center;
        if class == ShapeClass::Circle {
            let r = 0.5 * self.size;
            return Ok(BBox::new(cx - r, cy - r, cx + r, cy + r));
        }
        let v = self.vertices(class);
        let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| v.iter().map(pick).fold(init, f);
        Ok(BBox::new(
            fold(f64::min, f64::INFINITY, |p| p.0),
            fold(f64::min, f64::INFINITY, |p| p.1),
            fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        ))
    }

    fn contains(&self, class: ShapeClass, verts: &[(f64, f64)], x: f64, y: f64) -> bool {
        match class {
            ShapeClass::Circle => {
                let r = 0.5 * self.size;
                let (dx, dy) = (x - self.center.0, y - self.center.1);
                dx * dx + dy * dy <= r * r
            }
            _ => {
                // Convex polygon with counter-clockwise vertices in image coordinates.
                let n = verts.len();
                (0..n).all(|k| {
                    let (ax, ay) = verts[k];
                    let (bx, by) = verts[(k + 1) % n];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<Vec<BoxAnnotation>> {
        if self.image_size == 0 {
            return Err(Error::InvalidScene("image size must be positive".into()));
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidScene(format!(
                "{} objects exceeds the maximum of {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        let side = self.image_size as f64;
        let mut annotations = Vec::with_capacity(self.objects.len());
        for obj in &self.objects {
            let bbox = obj.tight_box()?;
            if !bbox.is_inside(side, side) || bbox.area() <= 0.0 {
                return Err(Error::InvalidScene(format!("object box {bbox:?} leaves the image")));
            }
            annotations.push(BoxAnnotation {
                class_id: obj.class_id,
                bbox,
            });
        }
        for i in 0..annotations.len() {
            for j in i + 1..annotations.len() {
                let iou = annotations[i].bbox.iou(&annotations[j].bbox);
                if iou > MAX_OVERLAP_IOU {
                    return Err(Error::InvalidScene(format!(
                        "objects {i} and {j} overlap with IoU {iou:.3} > {MAX_OVERLAP_IOU}"
                    )));
                }
            }
        }
        Ok(annotations)
    }
}

/// Mixes a base seed with a stream id and an index (splitmix64 finalizer), so
/// per-image seeds do not depend on generation order.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Renders the clean (source-style) image.
fn render_clean(spec: &SceneSpec) -> Array3<f64> {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, 11, 0));
    let bg_a = random_color(&mut rng, 0.05, 0.55);
    let bg_b = random_color(&mut rng, 0.05, 0.55);
    let mut img = Array3::<f64>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let t = match spec.background_style {
                BackgroundStyle::Flat => 0.0,
                BackgroundStyle::HorizontalGradient => x as f64 / (n - 1).max(1) as f64,
                BackgroundStyle::VerticalGradient => y as f64 / (n - 1).max(1) as f64,
            };
            for c in 0..3 {
                img[[y, x, c]] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
            }
        }
    }
    let bg_lum = 0.5 * (luminance(bg_a) + luminance(bg_b));
    // 2x2 supersampling for anti-aliased edges.
    const SUB: [f64; 2] = [0.25, 0.75];
    for obj in &spec.objects {
        let class = ShapeClass::from_id(obj.class_id).expect("validated");
        let mut color = random_color(&mut rng, 0.2, 1.0);
        // Keep shapes visible against the background.
        while (luminance(color) - bg_lum).abs() < 0.25 {
            color = random_color(&mut rng, 0.2, 1.0);
        }
        let verts = obj.vertices(class);
        let bbox = obj.tight_box().expect("validated");
        let (x0, y0) = (bbox.x1.floor().max(0.0) as usize, bbox.y1.floor().max(0.0) as usize);
        let (x1, y1) = ((bbox.x2.ceil() as usize).min(n), (bbox.y2.ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut cover = 0.0;
                for sy in SUB {
                    for sx in SUB {
                        if obj.contains(class, &verts, x as f64 + sx, y as f64 + sy) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    for c in 0..3 {
                        img[[y, x, c]] = img[[y, x, c]] * (1.0 - cover) + color[c] * cover;
                    }
                }
            }
        }
    }
    img
}

/// Rotation about the gray axis in RGB space.
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let q = (1.0f64 / 3.0).sqrt() * s;
    [
        [c + k, k - q, k + q],
        [k + q, c + k, k - q],
        [k - q, k + q, c + k],
    ]
}

fn apply_target_style(img: &mut Array3<f64>, style: &StyleParams, seed: u64) {
    let m = hue_matrix(style.hue_shift_deg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13, 0));
    let noise = Normal::new(0.0, style.noise_std.max(0.0)).expect("finite std");
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = (1.0 - style.fog_density) * img[[y, x, c]] + style.fog_density * style.fog_color[c];
            }
            for c in 0..3 {
                let rotated = m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2];
                let n = if style.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img[[y, x, c]] = (rotated + n).clamp(0.0, 1.0);
            }
        }
    }
}

/// Renders a scene in the given domain.
pub fn render_scene(spec: &SceneSpec, domain: Domain, style: &StyleParams) -> Result<ImageSample> {
    let annotations = spec.validate()?;
    let mut pixels = render_clean(spec);
    if domain == Domain::Target {
        apply_target_style(&mut pixels, style, spec.rng_seed);
    }
    Ok(ImageSample {
        pixels,
        domain,
        annotations: Some(annotations),
        sample_id: format!("{:016x}", spec.rng_seed),
    })
}

/// Knobs for random scene sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Pairwise box IoU allowed while sampling (stricter than the hard limit).
    pub max_iou: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            num_classes: DEFAULT_NUM_CLASSES,
            min_objects: 1,
            max_objects: 4,
            min_size: 18.0,
            max_size: 34.0,
            max_iou: 0.1,
        }
    }
}

impl SceneSampler {
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.image_size as f64;
        let count = rng.gen_range(self.min_objects..=self.max_objects.min(MAX_OBJECTS));
        let background_style = match rng.gen_range(0..3) {
            0 => BackgroundStyle::Flat,
            1 => BackgroundStyle::HorizontalGradient,
            _ => BackgroundStyle::VerticalGradient,
        };
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut boxes: Vec<BBox> = Vec::new();
        let mut attempts = 0;
        while objects.len() < count && attempts < 200 {
            attempts += 1;
            let size = rng.gen_range(self.min_size..=self.max_size);
            let half = 0.5 * size * std::f64::consts::SQRT_2 + 1.0;
            if 2.0 * half >= side {
                continue;
            }
            let obj = SceneObject {
                class_id: rng.gen_range(1..=self.num_classes.min(3)),
                center: (rng.gen_range(half..side - half), rng.gen_range(half..side - half)),
                size,
                angle: rng.gen_range(0.0..std::f64::consts::TAU),
            };
            let bbox = obj.tight_box().expect("class in range");
            if boxes.iter().any(|b| b.iou(&bbox) > self.max_iou) {
                continue;
            }
            boxes.push(bbox);
            objects.push(obj);
        }
        SceneSpec {
            image_size: self.image_size,
            objects,
            background_style,
            rng_seed: seed,
        }
    }
}

/// Photometric jitter drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricJitter {
    pub contrast: f64,
    pub saturation: f64,
    /// Shift on the 0..255 scale.
    pub brightness: f64,
}

impl PhotometricJitter {
    pub const IDENTITY: PhotometricJitter = PhotometricJitter {
        contrast: 1.0,
        saturation: 1.0,
        brightness: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            contrast: rng.gen_range(0.5..1.5),
            saturation: rng.gen_range(0.5..1.5),
            brightness: rng.gen_range(-32.0..32.0),
        }
    }

    pub fn apply(&self, pixels: &Array3<f64>) -> Array3<f64> {
        let mut out = pixels.clone();
        let (h, w, _) = out.dim();
        let npx = (h * w) as f64;
        let mean_gray = out
            .outer_iter()
            .flat_map(|row| row.outer_iter().map(|p| luminance([p[0], p[1], p[2]])).collect::<Vec<_>>())
            .sum::<f64>()
            / npx.max(1.0);
        let shift = self.brightness / 255.0;
        for mut row in out.outer_iter_mut() {
            for mut px in row.outer_iter_mut() {
                for c in 0..3 {
                    px[c] = px[c] * self.contrast + mean_gray * (1.0 - self.contrast);
                }
                let gray = luminance([px[0], px[1], px[2]]);
                for c in 0..3 {
                    px[c] = (px[c] * self.saturation + gray * (1.0 - self.saturation) + shift).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Random contrast, saturation and brightness jitter; boxes and labels are
/// carried over untouched.
pub fn augment_photometric<R: Rng>(image: &ImageSample, rng: &mut R) -> ImageSample {
    let jitter = PhotometricJitter::sample(rng);
    ImageSample {
        pixels: jitter.apply(&image.pixels),
        domain: image.domain,
        annotations: image.annotations.clone(),
        sample_id: image.sample_id.clone(),
    }
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    Target,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::Target, Split::TargetEval];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::TargetEval => "target_eval",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::Target | Split::TargetEval => Domain::Target,
        }
    }

    pub fn labeled(self) -> bool {
        !matches!(self, Split::Target)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Source => 1,
            Split::Target => 2,
            Split::TargetEval => 3,
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "source" => Some(Split::Source),
            "target" => Some(Split::Target),
            "target_eval" => Some(Split::TargetEval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source: usize,
    pub target: usize,
    pub target_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub seed: u64,
    pub counts: SplitCounts,
    pub style_params: StyleParams,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub overwrite: bool,
    pub style: StyleParams,
    pub sampler: SceneSampler,
}

impl GenerateOptions {
    pub fn new(n_source: usize, n_target: usize, n_eval: usize, seed: u64) -> Self {
        Self {
            n_source,
            n_target,
            n_eval,
            seed,
            overwrite: false,
            style: StyleParams::default(),
            sampler: SceneSampler::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Scene for sample `index` of `split`; a pure function of the dataset seed.
pub fn split_scene(sampler: &SceneSampler, seed: u64, split: Split, index: usize) -> SceneSpec {
    sampler.sample(derive_seed(seed, split.stream(), index as u64))
}

pub fn generate_dataset(root: &Path, opts: &GenerateOptions) -> Result<DatasetPair> {
    if opts.n_source == 0 || opts.n_target == 0 || opts.n_eval == 0 {
        return Err(Error::InvalidArgument("all split counts must be positive".into()));
    }
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        if !opts.overwrite {
            return Err(Error::OutputNotEmpty(root.to_path_buf()));
        }
        fs::remove_dir_all(root)?;
    }
    fs::create_dir_all(root)?;
    let counts = SplitCounts {
        source: opts.n_source,
        target: opts.n_target,
        target_eval: opts.n_eval,
    };
    for split in Split::ALL {
        let n = match split {
            Split::Source => counts.source,
            Split::Target => counts.target,
            Split::TargetEval => counts.target_eval,
        };
        let dir = root.join(split.dir_name());
        fs::create_dir_all(dir.join("images"))?;
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let spec = split_scene(&opts.sampler, opts.seed, split, i);
            let sample = render_scene(&spec, split.domain(), &opts.style)?;
            let sample_id = format!("{}_{i:05}", split.dir_name());
            write_png(&dir.join("images").join(format!("{sample_id}.png")), &sample.pixels)?;
            let objects = if split.labeled() {
                sample
                    .annotations
                    .unwrap_or_default()
                    .iter()
                    .map(|a| ObjectRecord {
                        class_id: a.class_id,
                        bbox: a.bbox.to_array(),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            records.push(AnnotationRecord {
                sample_id,
                width: spec.image_size,
                height: spec.image_size,
                objects,
            });
        }
        fs::write(dir.join("annotations.json"), serde_json::to_vec_pretty(&records)?)?;
    }
    let manifest = Manifest {
        num_classes: opts.sampler.num_classes,
        seed: opts.seed,
        counts,
        style_params: opts.style.clone(),
        image_size: opts.sampler.image_size,
    };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(DatasetPair {
        root: root.to_path_buf(),
        manifest,
    })
}

pub fn write_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Dataset("pixel buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::Dataset(e.to_string()))
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every image of a split. Target (training) samples are returned
/// without annotations.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<ImageSample>> {
    let dir = root.join(split.dir_name());
    let ann_path = dir.join("annotations.json");
    let bytes = fs::read(&ann_path).map_err(|e| Error::Dataset(format!("missing split {}: {e}", ann_path.display())))?;
    let records: Vec<AnnotationRecord> = serde_json::from_slice(&bytes)?;
    records
        .into_iter()
        .map(|rec| {
            let pixels = read_png(&dir.join("images").join(format!("{}.png", rec.sample_id)))?;
            let annotations = split.labeled().then(|| {
                rec.objects
                    .iter()
                    .map(|o| BoxAnnotation {
                        class_id: o.class_id,
                        bbox: BBox::from_array(o.bbox),
                    })
                    .collect()
            });
            Ok(ImageSample {
                pixels,
                domain: split.domain(),
                annotations,
                sample_id: rec.sample_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_object_spec() -> SceneSpec {
        SceneSpec {
            image_size: 64,
            objects: vec![SceneObject {
                class_id: 2,
                center: (30.0, 30.0),
                size: 20.0,
                angle: 0.3,
            }],
            background_style: BackgroundStyle::Flat,
            rng_seed: 42,
        }
    }

    #[test]
    fn empty_scene_has_no_annotations() {
        let mut spec = one_object_spec();
        spec.objects.clear();
        let s = render_scene(&spec, Domain::Source, &StyleParams::default()).unwrap();
        assert_eq!(s.annotations, Some(vec![]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSampler::default().sample(5);
        for domain in [Domain::Source, Domain::Target] {
            let a = render_scene(&spec, domain, &StyleParams::default()).unwrap();
            let b = render_scene(&spec, domain, &StyleParams::default()).unwrap();
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn domains_share_labels_but_not_pixels() {
        let spec = SceneSampler::default().sample(9);
        let s = render_scene(&spec, Domain::Source, &StyleParams::default()).unwrap();
        let t = render_scene(&spec, Domain::Target, &StyleParams::default()).unwrap();
        assert_eq!(s.annotations, t.annotations);
        let mad = (&s.pixels - &t.pixels).mapv(f64::abs).mean().unwrap();
        assert!(mad > 0.0);
    }

    #[test]
    fn heavy_overlap_is_rejected() {
        let mut spec = one_object_spec();
        let mut twin = spec.objects[0].clone();
        twin.center.0 += 0.5;
        spec.objects.push(twin);
        assert!(matches!(
            render_scene(&spec, Domain::Source, &StyleParams::default()),
            Err(Error::InvalidScene(_))
        ));
    }

    #[test]
    fn out_of_bounds_and_too_many_objects_rejected() {
        let mut spec = one_object_spec();
        spec.objects[0].center = (2.0, 2.0);
        assert!(spec.validate().is_err());
        let mut spec = one_object_spec();
        spec.objects = (0..7)
            .map(|k| SceneObject {
                class_id: 1,
                center: (8.0 + 8.0 * k as f64, 8.0),
                size: 4.0,
                angle: 0.0,
            })
            .collect();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn circle_box_is_tight() {
        let obj = SceneObject {
            class_id: 1,
            center: (20.0, 30.0),
            size: 10.0,
            angle: 1.0,
        };
        assert_eq!(obj.tight_box().unwrap(), BBox::new(15.0, 25.0, 25.0, 35.0));
    }

    #[test]
    fn identity_jitter_is_exact() {
        let spec = SceneSampler::default().sample(3);
        let s = render_scene(&spec, Domain::Target, &StyleParams::default()).unwrap();
        assert_eq!(PhotometricJitter::IDENTITY.apply(&s.pixels), s.pixels);
    }

    #[test]
    fn brightness_on_black_image() {
        let black = Array3::<f64>::zeros((4, 5, 3));
        let j = PhotometricJitter {
            brightness: 32.0,
            ..PhotometricJitter::IDENTITY
        };
        let out = j.apply(&black);
        assert!(out.iter().all(|&v| v == 32.0 / 255.0));
    }

    #[test]
    fn sampled_scenes_are_valid() {
        let sampler = SceneSampler::default();
        for seed in 0..200 {
            let spec = sampler.sample(seed);
            assert!(!spec.objects.is_empty() && spec.objects.len() <= MAX_OBJECTS);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn generate_minimal_and_refuse_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let pair = generate_dataset(&root, &GenerateOptions::new(1, 1, 1, 0)).unwrap();
        assert_eq!(pair.manifest.num_classes, 3);
        assert_eq!(load_split(&root, Split::Source).unwrap().len(), 1);
        let target = load_split(&root, Split::Target).unwrap();
        assert!(target[0].annotations.is_none());
        assert!(matches!(
            generate_dataset(&root, &GenerateOptions::new(1, 1, 1, 0)),
            Err(Error::OutputNotEmpty(_))
        ));
        let mut opts = GenerateOptions::new(1, 1, 1, 0);
        opts.overwrite = true;
        generate_dataset(&root, &opts).unwrap();
        assert!(generate_dataset(&dir.path().join("x"), &GenerateOptions::new(0, 1, 1, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_keeps_labels_and_range(seed in 0u64..10_000, draw in 0u64..10_000) {
            let spec = SceneSampler::default().sample(seed);
            let s = render_scene(&spec, Domain::Source, &StyleParams::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(draw);
            let aug = augment_photometric(&s, &mut rng);
            prop_assert_eq!(&aug.annotations, &s.annotations);
            prop_assert!(aug.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let t = render_scene(&spec, Domain::Target, &StyleParams::default()).unwrap();
            prop_assert!(t.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

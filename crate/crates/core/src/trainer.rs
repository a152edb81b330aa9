//! Joint training loop: supervised detection on source images plus, for the
//! adaptive variants, teacher-student consistency and the adversarial bank on
//! target images. One source and one target image per step.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::checkpoint::{self, Checkpoint, Role};
use crate::dcbank::{bank_loss_with_gates, entropy_from_logits, gate_rows, grl_ramp, DomainBank, Gate};
use crate::detector::{
    detection_loss, extract_features, generate_anchors, proposals_from_rpn, rpn_forward, sample_rois, DetectorConfig,
    RegionPass, RpnTargets,
};
use crate::error::{Error, Result};
use crate::meanteacher::{consistency_loss, ema_update, student_on_shared_proposals, teacher_pseudo_labels, TeacherState};
use crate::nn::{softmax_backward, ParamStore};
use crate::optim::MomentumSgd;
use crate::synthdata::{augment_photometric, derive_seed, load_manifest, load_split, ImageSample, Split};

const STREAM_STUDENT_INIT: u64 = 101;
const STREAM_BANK_INIT: u64 = 102;
const STREAM_SOURCE: u64 = 103;
const STREAM_TARGET: u64 = 104;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FasterOnly,
    MtIns,
    MdbankH,
    Mdbank,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FasterOnly, Variant::MtIns, Variant::MdbankH, Variant::Mdbank];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FasterOnly => "faster_only",
            Variant::MtIns => "mt_ins",
            Variant::MdbankH => "mdbank_h",
            Variant::Mdbank => "mdbank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    /// A single class-agnostic discriminator.
    Single,
    /// One discriminator per class plus background.
    PerClass,
}

/// Which loss terms a variant switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub consistency: bool,
    /// Consistency residuals weighted by bank entropy (otherwise weights are 1).
    pub entropy_weighting: bool,
    pub bank: Option<BankKind>,
    /// Gate used when `bank` is per-class.
    pub gate: Option<Gate>,
}

impl Wiring {
    pub fn adapts(&self) -> bool {
        self.consistency || self.bank.is_some()
    }
}

pub fn variant_wiring(variant: Variant) -> Wiring {
    match variant {
        Variant::FasterOnly => Wiring {
            consistency: false,
            entropy_weighting: false,
            bank: None,
            gate: None,
        },
        Variant::MtIns => Wiring {
            consistency: true,
            entropy_weighting: false,
            bank: Some(BankKind::Single),
            gate: None,
        },
        Variant::MdbankH => Wiring {
            consistency: true,
            entropy_weighting: false,
            bank: Some(BankKind::PerClass),
            gate: Some(Gate::G1),
        },
        Variant::Mdbank => Wiring {
            consistency: true,
            entropy_weighting: true,
            bank: Some(BankKind::PerClass),
            gate: Some(Gate::G2),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub k_top_target: usize,
    /// Overrides the variant's gate; only meaningful for per-class banks.
    pub gate: Option<Gate>,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub burnin_steps: usize,
    pub grl_coeff: f64,
    /// Ramp the reversal coefficient from 0 to `grl_coeff` over training.
    pub grl_ramp: bool,
    pub bank_hidden: usize,
    /// Regions sampled per source image for the head.
    pub roi_batch: usize,
    /// Checkpoint cadence in steps; 0 writes only the final pair.
    pub checkpoint_every: usize,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mdbank,
            eta: 5.0,
            lambda: 0.1,
            gamma: 2.0,
            alpha: 0.99,
            k_top_target: 512,
            gate: None,
            steps: 3000,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            seed: 0,
            burnin_steps: 500,
            grl_coeff: 1.0,
            grl_ramp: false,
            bank_hidden: 128,
            roi_batch: 128,
            checkpoint_every: 1000,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks ranges and variant/gate compatibility; returns the effective wiring.
    pub fn wiring(&self) -> Result<Wiring> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("eta", self.eta), ("lambda", self.lambda), ("grl_coeff", self.grl_coeff)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.k_top_target == 0 || self.steps == 0 || self.roi_batch == 0 || self.bank_hidden == 0 {
            return bad("k_top_target, steps, roi_batch and bank_hidden must be positive".into());
        }
        let mut w = variant_wiring(self.variant);
        if let Some(g) = self.gate {
            match (self.variant, g) {
                (Variant::MdbankH, Gate::G2) => {
                    return bad("mdbank_h uses hard labels and cannot take gate g2".into());
                }
                (Variant::Mdbank | Variant::MdbankH, g) => w.gate = Some(g),
                _ => {}
            }
        }
        Ok(w)
    }
}

/// One logged record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_det: f64,
    pub l_mt: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub domain_acc: f64,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub config: TrainConfig,
    pub wiring: Wiring,
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub bank: ParamStore,
    pub bank_shape: Option<DomainBank>,
    pub step: usize,
    opt_student: MomentumSgd,
    opt_bank: MomentumSgd,
    anchors: Option<(usize, usize, Vec<BBox>)>,
    rng_source: ChaCha8Rng,
    rng_target: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let wiring = config.wiring()?;
        let det = &config.detector;
        let student = det.init_params(derive_seed(config.seed, STREAM_STUDENT_INIT, 0));
        let teacher = TeacherState::from_student(&student, config.alpha)?;
        let bank_shape = wiring.bank.map(|k| match k {
            BankKind::Single => DomainBank::single(det.region_dim(), config.bank_hidden),
            BankKind::PerClass => DomainBank::per_class(det.num_classes, det.region_dim(), config.bank_hidden),
        });
        let bank = bank_shape
            .map(|b| b.init_params(derive_seed(config.seed, STREAM_BANK_INIT, 0)))
            .unwrap_or_default();
        let opt = || MomentumSgd::new(config.lr, config.momentum, config.weight_decay, config.clip_norm);
        Ok(Self {
            opt_student: opt(),
            opt_bank: opt(),
            rng_source: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SOURCE, 0)),
            rng_target: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TARGET, 0)),
            anchors: None,
            wiring,
            student,
            teacher,
            bank,
            bank_shape,
            step: 0,
            config,
        })
    }

    /// Whether the adaptation terms contribute at the current step.
    pub fn adaptation_active(&self) -> bool {
        self.wiring.adapts() && self.config.eta > 0.0 && self.step >= self.config.burnin_steps
    }

    fn anchors(&mut self, h: usize, w: usize) -> &[BBox] {
        let stale = !matches!(&self.anchors, Some((ah, aw, _)) if *ah == h && *aw == w);
        if stale {
            self.anchors = Some((h, w, generate_anchors(&self.config.detector, h, w)));
        }
        &self.anchors.as_ref().expect("anchors").2
    }

    /// One optimizer step on the student (and bank), followed by exactly one
    /// EMA update of the teacher. `target` is ignored while adaptation is off.
    pub fn train_step(&mut self, source: &ImageSample, target: Option<&ImageSample>) -> Result<StepMetrics> {
        let cfg = self.config.clone();
        let det = &cfg.detector;
        let annotations = source
            .annotations
            .as_deref()
            .ok_or_else(|| Error::Dataset(format!("source sample {} has no annotations", source.sample_id)))?;
        let (h, w) = (source.height(), source.width());

        // Supervised branch on the clean source image.
        let (feat, backbone) = extract_features(&self.student, det, &source.pixels)?;
        let (rpn_out, rpn_cache) = rpn_forward(&self.student, det, &feat);
        let gts: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
        let anchors = self.anchors(feat.height(), feat.width()).to_vec();
        let rpn_targets = RpnTargets::new(&anchors, &gts, &mut self.rng_source);
        let (proposals, _) = proposals_from_rpn(&rpn_out, &anchors, w as f64, h as f64, det.train_proposals, det);
        let rois = sample_rois(&proposals, annotations, det.num_classes, cfg.roi_batch, &mut self.rng_source);
        let src_pass = RegionPass::forward(&self.student, det, &feat, &rois.boxes);
        let (breakdown, rpn_loss, head_loss) = detection_loss(&rpn_out, &rpn_targets, &src_pass.head, &rois)?;

        let mut grads = self.student.zeros_like();
        let mut bank_grads = self.bank.zeros_like();
        let (mut l_mt, mut l_adv, mut domain_acc) = (0.0, 0.0, 0.0);
        let mut d_src_features = None;
        let active = self.adaptation_active() && target.is_some();

        if let (true, Some(target)) = (active, target) {
            let pseudo = teacher_pseudo_labels(&self.teacher.params, det, &target.pixels, cfg.k_top_target)?;
            let augmented = augment_photometric(target, &mut self.rng_target);
            let shared = student_on_shared_proposals(&self.student, det, &augmented.pixels, &pseudo.proposals)?;
            let k = pseudo.len();
            let cols = det.num_classes + 1;

            let mut consistency_weights = Array2::ones((k, cols));
            let mut d_tgt_features = None;
            if let (Some(bank_shape), Some(kind)) = (self.bank_shape, self.wiring.bank) {
                let (src_gates, tgt_gates) = match kind {
                    BankKind::Single => (Array2::ones((rois.labels.len(), 1)), Array2::ones((k, 1))),
                    BankKind::PerClass => {
                        let mut g = Array2::zeros((rois.labels.len(), cols));
                        for (r, &y) in rois.labels.iter().enumerate() {
                            g[[r, y]] = 1.0;
                        }
                        let gate = self.wiring.gate.unwrap_or(Gate::G2);
                        (g, gate_rows(pseudo.teacher_probs.view(), gate, cfg.gamma)?)
                    }
                };
                let coeff = if cfg.grl_ramp {
                    cfg.grl_coeff * grl_ramp(self.step as f64 / cfg.steps as f64)
                } else {
                    cfg.grl_coeff
                };
                let bank_out = bank_loss_with_gates(
                    &self.bank,
                    &bank_shape,
                    &src_pass.features,
                    &src_gates,
                    &shared.pass.features,
                    &tgt_gates,
                    coeff,
                    cfg.eta * cfg.lambda,
                    &mut bank_grads,
                )?;
                l_adv = bank_out.value;
                domain_acc = bank_out.accuracy;
                if self.wiring.entropy_weighting {
                    // Bank outputs act as constant weights on the consistency term.
                    consistency_weights = entropy_from_logits(bank_out.target_logits.view());
                }
                d_src_features = Some(bank_out.d_source_features);
                d_tgt_features = Some(bank_out.d_target_features);
            }

            let (mut d_logits, mut d_deltas) = (Array2::zeros((k, cols)), Array3::zeros((k, det.num_classes, 4)));
            if self.wiring.consistency {
                let student_head = shared.head();
                let cons = consistency_loss(
                    pseudo.teacher_probs.view(),
                    pseudo.teacher_deltas.view(),
                    student_head.class_probs.view(),
                    student_head.box_deltas.view(),
                    consistency_weights.view(),
                )?;
                l_mt = cons.value;
                d_logits = softmax_backward(student_head.class_probs.view(), (&cons.d_student_probs * cfg.eta).view());
                d_deltas = cons.d_student_deltas * cfg.eta;
            }
            let d_feat_t = shared
                .pass
                .backward(&self.student, &d_logits, &d_deltas, d_tgt_features.as_ref(), &mut grads);
            shared.backbone.backward(&self.student, &d_feat_t, &mut grads);
        }

        let mut d_feat = src_pass.backward(
            &self.student,
            &head_loss.d_logits,
            &head_loss.d_deltas,
            d_src_features.as_ref(),
            &mut grads,
        );
        d_feat += &rpn_cache.backward(&self.student, det, &rpn_loss.d_logits, &rpn_loss.d_deltas, &mut grads);
        backbone.backward(&self.student, &d_feat, &mut grads);
        if !grads.all_finite() || !bank_grads.all_finite() {
            return Err(Error::NonFiniteLoss("gradient"));
        }

        self.opt_student.step(&mut self.student, &grads);
        if active && !self.bank.is_empty() {
            self.opt_bank.step(&mut self.bank, &bank_grads);
        }
        ema_update(&mut self.teacher, &self.student)?;

        let l_det = breakdown.total();
        let metrics = StepMetrics {
            step: self.step,
            l_det,
            l_mt,
            l_adv,
            l_total: l_det + cfg.eta * (l_mt + cfg.lambda * l_adv),
            domain_acc,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Detector tensors of `role` plus the bank, ready to save.
    pub fn checkpoint(&self, role: Role) -> Result<Checkpoint> {
        let mut params = match role {
            Role::Student => self.student.clone(),
            Role::Teacher => self.teacher.params.clone(),
        };
        params.extend(self.bank.clone());
        Ok(Checkpoint {
            params,
            detector: self.config.detector.clone(),
            role: role.as_str().into(),
            step: self.step,
            train_config: Some(serde_json::to_string(&self.config)?),
        })
    }
}

/// Deterministic sampler that walks a fresh permutation every epoch.
struct EpochOrder {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub run_dir: PathBuf,
    pub last: StepMetrics,
    pub student_checkpoint: PathBuf,
    pub teacher_checkpoint: PathBuf,
}

pub const CONFIG_ECHO: &str = "config_echo.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn final_checkpoint_name(role: Role) -> String {
    format!("final_{}.safetensors", role.as_str())
}

/// Trains from scratch on the dataset at `dataset_root`, writing the config
/// echo, the per-step metrics log and checkpoints under `run_dir`.
pub fn fit(config: &TrainConfig, dataset_root: &Path, run_dir: &Path) -> Result<FitSummary> {
    let wiring = config.wiring()?;
    let manifest = load_manifest(dataset_root)?;
    if manifest.num_classes != config.detector.num_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: config.detector.num_classes,
            dataset: manifest.num_classes,
        });
    }
    let source = load_split(dataset_root, Split::Source)?;
    let target = if wiring.adapts() {
        load_split(dataset_root, Split::Target)?
    } else {
        Vec::new()
    };
    if source.is_empty() || (wiring.adapts() && target.is_empty()) {
        return Err(Error::Dataset("training splits must not be empty".into()));
    }

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(run_dir.join(CONFIG_ECHO), serde_json::to_vec_pretty(config)?)?;
    let mut log = BufWriter::new(File::create(run_dir.join(METRICS_LOG))?);

    let mut state = TrainState::new(config.clone())?;
    let mut source_order = EpochOrder::new(source.len(), derive_seed(config.seed, STREAM_SOURCE, 1));
    let mut target_order = EpochOrder::new(target.len().max(1), derive_seed(config.seed, STREAM_TARGET, 1));
    let mut last = None;
    for step in 0..config.steps {
        let s = &source[source_order.next()];
        let t = if state.adaptation_active() {
            Some(&target[target_order.next()])
        } else {
            None
        };
        let m = state.train_step(s, t)?;
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n")?;
        if step % 100 == 0 {
            log::info!(
                "step {step}: l_det {:.4} l_mt {:.4} l_adv {:.4} acc {:.3}",
                m.l_det,
                m.l_mt,
                m.l_adv,
                m.domain_acc
            );
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            for role in [Role::Student, Role::Teacher] {
                let path = ckpt_dir.join(format!("step_{:06}_{}.safetensors", step + 1, role.as_str()));
                checkpoint::save(&path, &state.checkpoint(role)?)?;
            }
        }
        last = Some(m);
    }
    log.flush()?;
    let student_checkpoint = ckpt_dir.join(final_checkpoint_name(Role::Student));
    let teacher_checkpoint = ckpt_dir.join(final_checkpoint_name(Role::Teacher));
    checkpoint::save(&student_checkpoint, &state.checkpoint(Role::Student)?)?;
    checkpoint::save(&teacher_checkpoint, &state.checkpoint(Role::Teacher)?)?;
    Ok(FitSummary {
        run_dir: run_dir.to_path_buf(),
        last: last.expect("at least one step"),
        student_checkpoint,
        teacher_checkpoint,
    })
}

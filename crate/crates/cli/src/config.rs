//! Flat TOML config file and command-line overrides. Precedence is
//! flag > file > built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use mdbank_core::dcbank::Gate;
use mdbank_core::detector::DetectorConfig;
use mdbank_core::synthdata::{GenerateOptions, StyleParams};
use mdbank_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

/// Every key a config file may hold. Dataset keys are read by `generate`,
/// training keys by `train`, `ablate` and `sweep`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n_source: Option<usize>,
    pub n_target: Option<usize>,
    pub n_eval: Option<usize>,
    pub data_seed: Option<u64>,
    pub fog_density: Option<f64>,
    pub fog_color: Option<[f64; 3]>,
    pub hue_shift_deg: Option<f64>,
    pub noise_std: Option<f64>,

    pub variant: Option<Variant>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub k_top_target: Option<usize>,
    pub gate: Option<Gate>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub burnin_steps: Option<usize>,
    pub grl_coeff: Option<f64>,
    pub grl_ramp: Option<bool>,
    pub bank_hidden: Option<usize>,
    pub roi_batch: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub workers: Option<usize>,
    pub detector: Option<DetectorConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// A file that reproduces `cfg` exactly.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            variant: Some(cfg.variant),
            eta: Some(cfg.eta),
            lambda: Some(cfg.lambda),
            gamma: Some(cfg.gamma),
            alpha: Some(cfg.alpha),
            k_top_target: Some(cfg.k_top_target),
            gate: cfg.gate,
            steps: Some(cfg.steps),
            lr: Some(cfg.lr),
            momentum: Some(cfg.momentum),
            weight_decay: Some(cfg.weight_decay),
            clip_norm: Some(cfg.clip_norm),
            seed: Some(cfg.seed),
            burnin_steps: Some(cfg.burnin_steps),
            grl_coeff: Some(cfg.grl_coeff),
            grl_ramp: Some(cfg.grl_ramp),
            bank_hidden: Some(cfg.bank_hidden),
            roi_batch: Some(cfg.roi_batch),
            checkpoint_every: Some(cfg.checkpoint_every),
            detector: Some(cfg.detector.clone()),
            ..Self::default()
        }
    }
}

/// Overrides for the training config.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// faster_only, mt_ins, mdbank_h or mdbank
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Weight of the adaptation terms
    #[arg(long)]
    pub eta: Option<f64>,
    /// Weight of the adversarial term inside the adaptation terms
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Exponent of the soft gate
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Teacher EMA factor
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Teacher proposals per target image
    #[arg(long)]
    pub k_top_target: Option<usize>,
    /// g1 (hard) or g2 (soft)
    #[arg(long, value_parser = parse_gate)]
    pub gate: Option<Gate>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub burnin_steps: Option<usize>,
    #[arg(long)]
    pub grl_coeff: Option<f64>,
    #[arg(long)]
    pub grl_ramp: Option<bool>,
    #[arg(long)]
    pub bank_hidden: Option<usize>,
    #[arg(long)]
    pub roi_batch: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_gate(s: &str) -> Result<Gate, String> {
    match s {
        "g1" | "G1" => Ok(Gate::G1),
        "g2" | "G2" => Ok(Gate::G2),
        _ => Err(format!("unknown gate `{s}`; use g1 or g2")),
    }
}

/// Overrides for dataset generation.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Seed of the scene sampler
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub fog_density: Option<f64>,
    #[arg(long)]
    pub hue_shift_deg: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

macro_rules! pick {
    ($target:expr, $flags:expr, $file:expr, $($field:ident),*) => {
        $(
            if let Some(v) = $flags.$field.clone().or($file.$field.clone()) {
                $target.$field = v;
            }
        )*
    };
}

pub fn resolve_train(file: &FileConfig, flags: &TrainFlags) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    pick!(
        cfg,
        flags,
        file,
        variant,
        eta,
        lambda,
        gamma,
        alpha,
        k_top_target,
        steps,
        lr,
        momentum,
        weight_decay,
        clip_norm,
        seed,
        burnin_steps,
        grl_coeff,
        grl_ramp,
        bank_hidden,
        roi_batch,
        checkpoint_every
    );
    cfg.gate = flags.gate.or(file.gate);
    if let Some(d) = &file.detector {
        cfg.detector = d.clone();
    }
    cfg
}

pub fn resolve_generate(file: &FileConfig, flags: &DataFlags) -> GenerateOptions {
    let n_source = flags.n_source.or(file.n_source).unwrap_or(500);
    let n_target = flags.n_target.or(file.n_target).unwrap_or(500);
    let n_eval = flags.n_eval.or(file.n_eval).unwrap_or(200);
    let seed = flags.data_seed.or(file.data_seed).unwrap_or(0);
    let mut opts = GenerateOptions::new(n_source, n_target, n_eval, seed);
    let mut style = StyleParams::default();
    pick!(style, flags, file, fog_density, hue_shift_deg, noise_std);
    if let Some(c) = file.fog_color {
        style.fog_color = c;
    }
    opts.style = style;
    opts
}

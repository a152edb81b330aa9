//! Ablation grids and hyper-parameter sweeps. Each cell is one training run
//! followed by evaluation of its teacher checkpoint on the target-eval split;
//! how a run is executed is left to a [`Launcher`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Role;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, EvalReport};
use crate::synthdata::Split;
use crate::trainer::{fit, final_checkpoint_name, TrainConfig, Variant, CHECKPOINT_DIR};

/// One cell of an experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Directory name of the run, unique within the experiment.
    pub key: String,
    pub config: TrainConfig,
}

pub trait Launcher: Sync {
    /// Trains `spec` into `run_dir` and returns the target-eval report.
    fn launch(&self, spec: &RunSpec, dataset_root: &Path, run_dir: &Path) -> Result<EvalReport>;
}

/// Runs training and evaluation inside the calling process.
pub struct InProcess;

impl Launcher for InProcess {
    fn launch(&self, spec: &RunSpec, dataset_root: &Path, run_dir: &Path) -> Result<EvalReport> {
        fit(&spec.config, dataset_root, run_dir)?;
        evaluate_checkpoint(&teacher_checkpoint(run_dir), dataset_root, Split::TargetEval)
    }
}

pub fn teacher_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(final_checkpoint_name(Role::Teacher))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: String,
    pub run_dir: PathBuf,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Executes `specs` with up to `workers` concurrent runs. Results come back in
/// the order of `specs`, whatever the completion order.
pub fn run_all(
    specs: &[RunSpec],
    dataset_root: &Path,
    out_dir: &Path,
    launcher: &dyn Launcher,
    workers: usize,
) -> Vec<RunResult> {
    let next = Mutex::new(0usize);
    let results: Mutex<BTreeMap<usize, RunResult>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(specs.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    if *n >= specs.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let spec = &specs[i];
                let run_dir = out_dir.join(&spec.key);
                log::info!("starting run {}", spec.key);
                let outcome = std::fs::create_dir_all(&run_dir)
                    .map_err(Error::from)
                    .and_then(|_| launcher.launch(spec, dataset_root, &run_dir));
                if let Err(e) = &outcome {
                    log::error!("run {} failed: {e}", spec.key);
                }
                let (report, error) = match outcome {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                results.lock().expect("results lock").insert(
                    i,
                    RunResult {
                        key: spec.key.clone(),
                        run_dir,
                        report,
                        error,
                    },
                );
            });
        }
    });
    results.into_inner().expect("results lock").into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Target-eval mAP per seed; `None` for failed runs.
    pub maps: BTreeMap<u64, Option<f64>>,
    pub mean_map: Option<f64>,
    /// Sample standard deviation over successful seeds.
    pub std_map: Option<f64>,
    /// Per-class AP averaged over successful seeds.
    pub mean_class_ap: BTreeMap<usize, f64>,
    pub failures: BTreeMap<u64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table with one row per variant and per-class AP columns.
    pub fn to_markdown(&self) -> String {
        let classes: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.mean_class_ap.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = String::from("| variant |");
        for c in &classes {
            out.push_str(&format!(" AP class {c} |"));
        }
        out.push_str(" mAP (mean ± std) | failed |\n|---|");
        out.push_str(&"---|".repeat(classes.len() + 2));
        out.push('\n');
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        for r in &self.rows {
            out.push_str(&format!("| {} |", r.variant.name()));
            for c in &classes {
                out.push_str(&format!(" {} |", r.mean_class_ap.get(c).map(|&v| pct(v)).unwrap_or_default()));
            }
            let map = match (r.mean_map, r.std_map) {
                (Some(m), Some(s)) => format!("{} ± {}", pct(m), pct(s)),
                (Some(m), None) => pct(m),
                _ => "-".into(),
            };
            out.push_str(&format!(" {map} | {} |\n", r.failures.len()));
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

pub fn ablation_specs(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<RunSpec>> {
    if seeds.is_empty() || variants.len() < 2 {
        return Err(Error::InvalidArgument(
            "ablation needs at least one seed and two variants".into(),
        ));
    }
    let mut specs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let config = TrainConfig {
                variant,
                seed,
                gate: None,
                ..base.clone()
            };
            config.wiring()?;
            specs.push(RunSpec {
                key: format!("{}_seed{seed}", variant.name()),
                config,
            });
        }
    }
    Ok(specs)
}

/// Trains every (variant, seed) pair and tabulates target-eval mAP.
pub fn ablate(
    base: &TrainConfig,
    dataset_root: &Path,
    out_dir: &Path,
    variants: &[Variant],
    seeds: &[u64],
    launcher: &dyn Launcher,
    workers: usize,
) -> Result<AblationTable> {
    let specs = ablation_specs(base, variants, seeds)?;
    let results = run_all(&specs, dataset_root, out_dir, launcher, workers);
    let mut rows = Vec::new();
    for &variant in variants {
        let mut maps = BTreeMap::new();
        let mut failures = BTreeMap::new();
        let mut class_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (spec, res) in specs.iter().zip(&results) {
            if spec.config.variant != variant {
                continue;
            }
            let seed = spec.config.seed;
            match &res.report {
                Some(report) => {
                    maps.insert(seed, Some(report.map));
                    for (&c, &ap) in &report.per_class_ap {
                        let e = class_sums.entry(c).or_insert((0.0, 0));
                        e.0 += ap;
                        e.1 += 1;
                    }
                }
                None => {
                    maps.insert(seed, None);
                    failures.insert(seed, res.error.clone().unwrap_or_default());
                }
            }
        }
        let ok: Vec<f64> = maps.values().flatten().copied().collect();
        let (mean_map, std_map) = mean_std(&ok);
        rows.push(AblationRow {
            variant,
            maps,
            mean_map,
            std_map,
            mean_class_ap: class_sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
            failures,
        });
    }
    let table = AblationTable {
        seeds: seeds.to_vec(),
        rows,
    };
    std::fs::write(out_dir.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
    std::fs::write(out_dir.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepParam::Eta),
            "lambda" => Ok(SweepParam::Lambda),
            _ => Err(Error::InvalidArgument(format!("cannot sweep `{s}`; use eta or lambda"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub map: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub param: SweepParam,
    pub variant: Variant,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    /// True when every point has a finite mAP in [0, 1].
    pub fn is_valid(&self) -> bool {
        !self.points.is_empty()
            && self
                .points
                .iter()
                .all(|p| p.value.is_finite() && matches!(p.map, Some(m) if (0.0..=1.0).contains(&m)))
    }
}

/// One run per value of `param` at the base config's seed and variant.
pub fn sweep(
    base: &TrainConfig,
    dataset_root: &Path,
    out_dir: &Path,
    param: SweepParam,
    values: &[f64],
    launcher: &dyn Launcher,
    workers: usize,
) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut specs = Vec::new();
    for &v in values {
        let mut config = base.clone();
        match param {
            SweepParam::Eta => config.eta = v,
            SweepParam::Lambda => config.lambda = v,
        }
        config.wiring()?;
        specs.push(RunSpec {
            key: format!("{}_{v}", param.name()),
            config,
        });
    }
    let results = run_all(&specs, dataset_root, out_dir, launcher, workers);
    let curve = SweepCurve {
        param,
        variant: base.variant,
        seed: base.seed,
        points: values
            .iter()
            .zip(results)
            .map(|(&value, r)| SweepPoint {
                value,
                map: r.report.map(|rep| rep.map),
                error: r.error,
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join(format!("sweep_{}.json", param.name())),
        serde_json::to_vec_pretty(&curve)?,
    )?;
    Ok(curve)
}

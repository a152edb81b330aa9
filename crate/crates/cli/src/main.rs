mod config;
mod launch;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mdbank_core::evaluation::{cross_domain_distance, dump_embeddings, evaluate_checkpoint};
use mdbank_core::experiment::{ablate, sweep, InProcess, Launcher, SweepParam};
use mdbank_core::synthdata::{generate_dataset, Split};
use mdbank_core::trainer::{fit, TrainConfig, Variant};
use serde_json::json;

use config::{resolve_generate, resolve_train, DataFlags, FileConfig, TrainFlags};
use launch::Subprocess;
use manifest::{RunManifest, RUN_MANIFEST};

const RUN_ROOT_ENV: &str = "MDBANK_RUN_ROOT";

#[derive(Parser)]
#[command(name = "mdbank", version, about = "Class-level domain adaptation for a toy two-stage detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic source/target dataset
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        /// Replace a non-empty output directory
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one variant
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory; defaults to <run root>/<variant>_seed<seed>
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Parent of generated run directories (env MDBANK_RUN_ROOT, default ./runs)
        #[arg(long)]
        run_root: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint on a labeled split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// source or target_eval
        #[arg(long, default_value = "target_eval")]
        split: String,
        /// Report file; printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a 2D region-embedding table here (CSV)
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        regions_per_image: usize,
        #[arg(long, default_value_t = 100)]
        max_images: usize,
        #[arg(long, default_value_t = 0)]
        embed_seed: u64,
    },
    /// Render a metrics log, eval report, sweep curve or embedding table to SVG
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (variant, seed) pair
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "faster_only,mt_ins,mdbank_h,mdbank")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Run cells in this process instead of child processes
        #[arg(long)]
        in_process: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train and evaluate once per value of eta or lambda
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        in_process: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
}

/// Usage errors exit with 1, failures after the inputs were accepted with 2.
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn run_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Run(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Generate {
            out,
            config,
            data,
            overwrite,
        } => {
            let file = FileConfig::load(config.as_deref()).map_err(usage)?;
            let mut opts = resolve_generate(&file, &data);
            opts.overwrite = overwrite;
            let resolved = json!({
                "n_source": opts.n_source,
                "n_target": opts.n_target,
                "n_eval": opts.n_eval,
                "data_seed": opts.seed,
                "style": opts.style,
            });
            let pair = generate_dataset(&out, &opts).map_err(|e| match e {
                mdbank_core::Error::OutputNotEmpty(_) | mdbank_core::Error::InvalidArgument(_) => usage(e),
                e => run_err(e),
            })?;
            let mut m = RunManifest::start("generate", resolved, Some(&out)).map_err(run_err)?;
            m.finish(&Ok(()));
            m.write(&out.join(RUN_MANIFEST)).map_err(run_err)?;
            println!(
                "wrote {} source, {} target, {} target_eval images to {}",
                pair.manifest.counts.source,
                pair.manifest.counts.target,
                pair.manifest.counts.target_eval,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            run_dir,
            run_root,
            config,
            train,
        } => {
            let file = FileConfig::load(config.as_deref()).map_err(usage)?;
            let cfg = resolve_train(&file, &train);
            cfg.wiring().map_err(usage)?;
            let run_dir = run_dir.unwrap_or_else(|| {
                run_root_dir(run_root).join(format!("{}_seed{}", cfg.variant.name(), cfg.seed))
            });
            train_run(&cfg, &data, &run_dir)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            embeddings,
            regions_per_image,
            max_images,
            embed_seed,
        } => {
            let split = Split::parse(&split)
                .filter(|s| s.labeled())
                .ok_or_else(|| usage(anyhow!("split must be source or target_eval, got `{split}`")))?;
            let resolved = json!({
                "checkpoint": checkpoint,
                "split": split,
                "embeddings": embeddings,
                "regions_per_image": regions_per_image,
                "max_images": max_images,
                "embed_seed": embed_seed,
            });
            let mut m = RunManifest::start("eval", resolved, Some(&data)).map_err(run_err)?;
            let outcome = eval_run(&checkpoint, &data, split, out.as_deref(), embeddings.as_deref(), (regions_per_image, max_images, embed_seed));
            if let Some(out) = &out {
                m.finish(&outcome);
                m.write(&out.with_extension("manifest.json")).map_err(run_err)?;
            }
            outcome.map_err(run_err)
        }
        Command::Plot { input, out } => {
            let parsed = plot::read_input(&input).map_err(usage)?;
            plot::render(&parsed, &out).map_err(run_err)?;
            println!("wrote {} to {}", parsed.kind(), out.display());
            Ok(())
        }
        Command::Ablate {
            data,
            out,
            variants,
            seeds,
            workers,
            in_process,
            config,
            train,
        } => {
            let file = FileConfig::load(config.as_deref()).map_err(usage)?;
            let base = resolve_train(&file, &train);
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v))
                .collect::<Result<Vec<_>, _>>()
                .map_err(usage)?;
            mdbank_core::experiment::ablation_specs(&base, &variants, &seeds).map_err(usage)?;
            let workers = workers.or(file.workers).unwrap_or(1);
            let resolved = json!({ "base": base, "variants": variants, "seeds": seeds, "workers": workers });
            experiment_run("ablate", resolved, &data, &out, |launcher| {
                let table = ablate(&base, &data, &out, &variants, &seeds, launcher, workers)?;
                print!("{}", table.to_markdown());
                let failed: usize = table.rows.iter().map(|r| r.failures.len()).sum();
                if failed > 0 {
                    return Err(anyhow!("{failed} run(s) failed; see ablation.json"));
                }
                Ok(())
            }, in_process)
        }
        Command::Sweep {
            data,
            out,
            param,
            values,
            workers,
            in_process,
            config,
            train,
        } => {
            let file = FileConfig::load(config.as_deref()).map_err(usage)?;
            let base = resolve_train(&file, &train);
            let param = SweepParam::parse(&param).map_err(usage)?;
            base.wiring().map_err(usage)?;
            let workers = workers.or(file.workers).unwrap_or(1);
            let resolved = json!({ "base": base, "param": param, "values": values, "workers": workers });
            experiment_run("sweep", resolved, &data, &out, |launcher| {
                let curve = sweep(&base, &data, &out, param, &values, launcher, workers)?;
                for p in &curve.points {
                    match (p.map, &p.error) {
                        (Some(m), _) => println!("{} = {}: mAP {:.4}", param.name(), p.value, m),
                        (None, e) => println!("{} = {}: failed ({})", param.name(), p.value, e.as_deref().unwrap_or("")),
                    }
                }
                if !curve.is_valid() {
                    return Err(anyhow!("sweep has failed points; see sweep_{}.json", param.name()));
                }
                Ok(())
            }, in_process)
        }
    }
}

fn run_root_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn train_run(cfg: &TrainConfig, data: &Path, run_dir: &Path) -> CmdResult {
    let manifest_path = run_dir.join(RUN_MANIFEST);
    if manifest_path.exists() {
        return Err(usage(anyhow!("{} already holds a run", run_dir.display())));
    }
    let mut m = RunManifest::start("train", serde_json::to_value(cfg).map_err(run_err)?, Some(data)).map_err(run_err)?;
    m.write(&manifest_path).map_err(run_err)?;
    let outcome = fit(cfg, data, run_dir).map_err(anyhow::Error::from);
    let summary = outcome.as_ref().map(|_| ()).map_err(|e| anyhow!("{e:#}"));
    m.finish(&summary);
    m.write(&manifest_path).map_err(run_err)?;
    let s = outcome.map_err(run_err)?;
    println!(
        "step {}: l_total {:.4}; teacher checkpoint {}",
        s.last.step,
        s.last.l_total,
        s.teacher_checkpoint.display()
    );
    Ok(())
}

fn eval_run(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: Option<&Path>,
    embeddings: Option<&Path>,
    (regions_per_image, max_images, embed_seed): (usize, usize, u64),
) -> anyhow::Result<()> {
    let report = evaluate_checkpoint(checkpoint, data, split)?;
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            let per_class: Vec<String> = report.per_class_ap.iter().map(|(c, ap)| format!("class {c} {ap:.4}")).collect();
            println!("mAP {:.4} ({})", report.map, per_class.join(", "));
        }
        None => println!("{text}"),
    }
    if let Some(path) = embeddings {
        let emb = dump_embeddings(checkpoint, data, regions_per_image, max_images, embed_seed)?;
        plot::write_embeddings_csv(path, &emb.rows)?;
        match cross_domain_distance(&emb) {
            Some(d) => eprintln!("cross-domain class distance {d:.4}"),
            None => eprintln!("cross-domain class distance undefined: no class seen in both domains"),
        }
    }
    Ok(())
}

fn experiment_run(
    name: &str,
    resolved: serde_json::Value,
    data: &Path,
    out: &Path,
    body: impl FnOnce(&dyn Launcher) -> anyhow::Result<()>,
    in_process: bool,
) -> CmdResult {
    std::fs::create_dir_all(out).map_err(run_err)?;
    let manifest_path = out.join(RUN_MANIFEST);
    let mut m = RunManifest::start(name, resolved, Some(data)).map_err(run_err)?;
    m.write(&manifest_path).map_err(run_err)?;
    let subprocess;
    let launcher: &dyn Launcher = if in_process {
        &InProcess
    } else {
        subprocess = Subprocess::current().map_err(run_err)?;
        &subprocess
    };
    let outcome = body(launcher);
    m.finish(&outcome);
    m.write(&manifest_path).map_err(run_err)?;
    outcome.map_err(run_err)
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdbank_core::evaluation::EvalReport;
use mdbank_core::experiment::{AblationTable, SweepCurve};
use mdbank_core::trainer::{TrainConfig, Variant};
use serde_json::Value;

fn mdbank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdbank"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mdbank")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = mdbank(&["generate", "--out", s(&data), "--n-source", "6", "--n-target", "6", "--n-eval", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

const QUICK: [&str; 8] = ["--steps", "4", "--burnin-steps", "2", "--k-top-target", "32", "--roi-batch", "32"];

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&mdbank(&["--help"])), 0);
    assert_eq!(code(&mdbank(&["--version"])), 0);
    assert_eq!(code(&mdbank(&[])), 1);
    assert_eq!(code(&mdbank(&["train", "--data", "x", "--no-such-flag"])), 1);
    assert_eq!(code(&mdbank(&["train", "--data", "x", "--variant", "mdbank_h", "--gate", "g2"])), 1);
    assert_eq!(code(&mdbank(&["eval", "--checkpoint", "c", "--data", "x", "--split", "target"])), 1);
    assert_eq!(code(&mdbank(&["sweep", "--data", "x", "--out", "y", "--param", "gamma", "--values", "1"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let run = dir.path().join("run");
    assert_eq!(code(&mdbank(&["train", "--data", s(&missing), "--run-dir", s(&run)])), 2);
}

#[test]
fn config_file_flags_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, "variant = \"mdbank\"\neta = 0.5\nlambda = 2.0\nsteps = 4\nburnin_steps = 2\nk_top_target = 32\n").unwrap();
    let run = dir.path().join("run");
    let out = mdbank(&["train", "--data", s(&data), "--run-dir", s(&run), "--config", s(&cfg_path), "--eta", "0.25"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let echo: TrainConfig = read_json(&run.join("config_echo.json"));
    assert_eq!(echo.eta, 0.25);
    assert_eq!(echo.lambda, 2.0);
    assert_eq!(echo.variant, Variant::Mdbank);
    assert_eq!(echo.gamma, TrainConfig::default().gamma);

    let manifest: Value = read_json(&run.join("run_manifest.json"));
    assert_eq!(manifest["status"], "succeeded");
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(serde_json::from_value::<TrainConfig>(manifest["config"].clone()).unwrap(), echo);
    let gen: Value = read_json(&data.join("run_manifest.json"));
    assert_eq!(manifest["dataset_fingerprint"], gen["dataset_fingerprint"]);
    assert_eq!(gen["config"]["n_source"], 6);

    // A second train into the same directory is refused.
    let again = mdbank(&["train", "--data", s(&data), "--run-dir", s(&run), "--config", s(&cfg_path)]);
    assert_eq!(code(&again), 1);

    // Run root from the environment.
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_mdbank"))
        .args(["train", "--data", s(&data), "--variant", "faster_only"])
        .args(QUICK)
        .env("MDBANK_RUN_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(root.join("faster_only_seed0/checkpoints/final_teacher.safetensors").exists());
}

#[test]
fn eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--run-dir", s(&run), "--variant", "mt_ins"];
    args.extend(QUICK);
    assert_eq!(code(&mdbank(&args)), 0);

    let ckpt = run.join("checkpoints/final_teacher.safetensors");
    let report_path = dir.path().join("report.json");
    let emb_path = dir.path().join("emb.csv");
    let out = mdbank(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&report_path),
        "--embeddings", s(&emb_path), "--regions-per-image", "3", "--max-images", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport = read_json(&report_path);
    assert_eq!(report.num_images, 4);
    let table = std::fs::read_to_string(&emb_path).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 * 4);
    assert!(dir.path().join("report.manifest.json").exists());

    // Without --out the report goes to stdout.
    let out = mdbank(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let printed: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, report);

    for input in [report_path.clone(), emb_path.clone(), run.join("metrics.jsonl")] {
        let svg = dir.path().join(format!("{}.svg", input.file_name().unwrap().to_string_lossy()));
        let out = mdbank(&["plot", "--input", s(&input), "--out", s(&svg)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    }
    let bad = dir.path().join("cfg.json");
    std::fs::write(&bad, "{\"a\": 1}").unwrap();
    assert_eq!(code(&mdbank(&["plot", "--input", s(&bad), "--out", s(&dir.path().join("x.svg"))])), 1);
}

#[test]
fn sweep_curve_roundtrips_through_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out_dir = dir.path().join("sweep");
    let mut args = vec![
        "sweep", "--data", s(&data), "--out", s(&out_dir), "--param", "lambda", "--values", "0.01,0.1,1.0",
        "--variant", "mdbank",
    ];
    args.extend(QUICK);
    let out = mdbank(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let curve: SweepCurve = read_json(&out_dir.join("sweep_lambda.json"));
    assert_eq!(curve.points.len(), 3);
    assert!(curve.is_valid());
    for key in ["lambda_0.01", "lambda_0.1", "lambda_1"] {
        assert!(out_dir.join(key).join("run_manifest.json").exists(), "{key}");
    }
    let svg = dir.path().join("sweep.svg");
    assert_eq!(code(&mdbank(&["plot", "--input", s(&out_dir.join("sweep_lambda.json")), "--out", s(&svg)])), 0);
}

#[test]
fn ablation_table_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let mut args = vec![
            "ablate", "--data", s(&data), "--out", s(&out_dir), "--variants", "faster_only,mdbank", "--seeds", "1,2,3",
            "--workers", "2",
        ];
        args.extend(QUICK);
        let out = mdbank(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let table: AblationTable = read_json(&out_dir.join("ablation.json"));
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.maps.len() == 3 && r.mean_class_ap.len() == 3));
        let md = std::fs::read_to_string(out_dir.join("ablation.md")).unwrap();
        assert!(md.contains("AP class 3"));
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1]);
}

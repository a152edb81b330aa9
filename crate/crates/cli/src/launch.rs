//! Runs each ablation or sweep cell as a child `mdbank` process.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mdbank_core::evaluation::EvalReport;
use mdbank_core::experiment::{teacher_checkpoint, Launcher, RunSpec};
use mdbank_core::{Error, Result};

use crate::config::FileConfig;

pub const CELL_CONFIG: &str = "config.toml";
pub const CELL_REPORT: &str = "eval_target_eval.json";

pub struct Subprocess {
    pub exe: PathBuf,
}

impl Subprocess {
    pub fn current() -> std::io::Result<Self> {
        Ok(Self {
            exe: std::env::current_exe()?,
        })
    }

    fn run(&self, args: &[&std::ffi::OsStr], run_dir: &Path, what: &str) -> Result<()> {
        let log = fs::File::create(run_dir.join(format!("{what}.log")))?;
        let status = Command::new(&self.exe)
            .args(args)
            .stdout(log.try_clone()?)
            .stderr(log)
            .status()?;
        if !status.success() {
            return Err(Error::RunFailed(format!(
                "{what} exited with {status}; see {}",
                run_dir.join(format!("{what}.log")).display()
            )));
        }
        Ok(())
    }
}

impl Launcher for Subprocess {
    fn launch(&self, spec: &RunSpec, dataset_root: &Path, run_dir: &Path) -> Result<EvalReport> {
        let cfg_path = run_dir.join(CELL_CONFIG);
        let text = toml::to_string(&FileConfig::from_train(&spec.config))
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&cfg_path, text)?;
        self.run(
            &[
                "train".as_ref(),
                "--data".as_ref(),
                dataset_root.as_os_str(),
                "--run-dir".as_ref(),
                run_dir.as_os_str(),
                "--config".as_ref(),
                cfg_path.as_os_str(),
            ],
            run_dir,
            "train",
        )?;
        let report_path = run_dir.join(CELL_REPORT);
        self.run(
            &[
                "eval".as_ref(),
                "--checkpoint".as_ref(),
                teacher_checkpoint(run_dir).as_os_str(),
                "--data".as_ref(),
                dataset_root.as_os_str(),
                "--split".as_ref(),
                "target_eval".as_ref(),
                "--out".as_ref(),
                report_path.as_os_str(),
            ],
            run_dir,
            "eval",
        )?;
        Ok(serde_json::from_slice(&fs::read(&report_path)?)?)
    }
}

//! Run manifests: what was run, on which data, by which build.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mdbank_core::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Full argument vector, program name excluded.
    pub command: Vec<String>,
    /// The config after file and flag overrides were applied.
    pub config: serde_json::Value,
    pub dataset_root: Option<PathBuf>,
    pub dataset_fingerprint: Option<String>,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: Status,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn start(subcommand: &str, config: serde_json::Value, dataset_root: Option<&Path>) -> Result<Self> {
        let dataset_fingerprint = dataset_root.map(dataset_fingerprint).transpose()?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            command: std::env::args().skip(1).collect(),
            config,
            dataset_root: dataset_root.map(Path::to_path_buf),
            dataset_fingerprint,
            code_version: code_version(),
            started_unix: now(),
            finished_unix: None,
            status: Status::Running,
            error: None,
        })
    }

    pub fn finish(&mut self, outcome: &Result<()>) {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = Status::Succeeded,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(path, &serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn code_version() -> String {
    format!("mdbank {}", env!("CARGO_PKG_VERSION"))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// SHA-256 over every file under `root` (relative path and bytes, in sorted
/// path order). Run manifests are skipped so that writing one does not move
/// the fingerprint.
pub fn dataset_fingerprint(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel))?;
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

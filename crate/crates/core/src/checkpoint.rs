//! Parameter snapshots in the safetensors format. Detector and bank tensors
//! share one file; metadata carries the detector geometry and the resolved
//! training config.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// All metadata lives under one key: safetensors keeps metadata in a hash
/// map, so several keys would be written in a different order every time.
const KEY_META: &str = "mdbank";

#[derive(Serialize, Deserialize)]
struct Header {
    detector_config: DetectorConfig,
    role: String,
    step: usize,
    train_config: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Detector tensors plus any `dcbank/` entries.
    pub params: ParamStore,
    pub detector: DetectorConfig,
    pub role: String,
    pub step: usize,
    /// JSON echo of the training config, if any.
    pub train_config: Option<String>,
}

impl Checkpoint {
    /// Detector parameters only, checked against a freshly initialized network.
    pub fn detector_params(&self) -> Result<ParamStore> {
        let reference = self.detector.init_params(0);
        let mut out = ParamStore::new();
        for (name, expected) in reference.iter() {
            let t = self
                .params
                .get(name)
                .map_err(|_| Error::MissingParameter(name.to_string()))?;
            if t.shape() != expected.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            out.insert(name, t.clone());
        }
        Ok(out)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let raw = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), raw, t.shape().to_vec())
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (name, raw, shape) in &bytes {
        let view =
            TensorView::new(Dtype::F64, shape.clone(), raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        views.push((name.as_str(), view));
    }
    let header = Header {
        detector_config: ckpt.detector.clone(),
        role: ckpt.role.clone(),
        step: ckpt.step,
        train_config: ckpt.train_config.clone(),
    };
    let meta = HashMap::from([(KEY_META.to_string(), serde_json::to_string(&header)?)]);
    let data = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &data)
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&data).map_err(bad)?;
    let meta = header.metadata().clone().unwrap_or_default();
    let raw = meta
        .get(KEY_META)
        .ok_or_else(|| Error::Checkpoint(format!("{}: metadata key `{KEY_META}` missing", path.display())))?;
    let header: Header = serde_json::from_str(raw)?;
    let tensors = SafeTensors::deserialize(&data).map_err(bad)?;
    let mut params = ParamStore::new();
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not f64")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(name, t);
    }
    Ok(Checkpoint {
        params,
        detector: header.detector_config,
        role: header.role,
        step: header.step,
        train_config: header.train_config,
    })
}

//! Checkpoint directories: `metadata.json`, `blobs.json` and `tensors.bin`
//! (little-endian f32, concatenated in blob order).

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::config::RunConfig;
use crate::data::{SamplerState, Vocabulary};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::train::optim::{Adam, Moments};

pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    /// Mean of each loss term over the epoch, in a fixed per-stage order.
    pub losses: Vec<(String, f64)>,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub stage: u8,
    /// Completed epochs within the stage.
    pub epoch: usize,
    /// Optimization steps taken within the stage.
    pub step: u64,
    pub optimizer_step: u64,
    pub sampler: SamplerState,
    /// Resolved model configuration (vocabulary size, identity count, routing).
    pub model: ModelConfig,
    pub with_prompts: bool,
    pub vocab: Vocabulary,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    params: &Params,
    adam: Option<&Adam>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, Tensor)> = params
        .all_vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    if let Some(adam) = adam {
        for (n, m) in &adam.moments {
            named.push((format!("{ADAM_M}{n}"), m.m.clone()));
            named.push((format!("{ADAM_V}{n}"), m.v.clone()));
        }
    }
    let mut bytes = Vec::new();
    let mut blobs = Vec::with_capacity(named.len());
    for (name, t) in named {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        blobs.push(BlobEntry {
            name,
            shape: t.dims().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join("tensors.bin");
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    write_json(&dir.join("blobs.json"), &blobs)?;
    write_json(&dir.join("metadata.json"), meta)
}

/// Loads a checkpoint. When `expected` is given, a differing config hash is refused
/// unless `allow_mismatch` is set.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&RunConfig>,
    allow_mismatch: bool,
) -> Result<Checkpoint> {
    let meta_path = dir.join("metadata.json");
    if !meta_path.exists() {
        return Err(Error::Config(format!("no checkpoint at {}", dir.display())));
    }
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint format {} is not supported",
            meta.format
        )));
    }
    if let Some(cfg) = expected {
        let hash = cfg.hash()?;
        if hash != meta.config_hash && !allow_mismatch {
            return Err(Error::Config(format!(
                "checkpoint {} was written under config {}, current config is {}",
                dir.display(),
                &meta.config_hash[..12],
                &hash[..12]
            )));
        }
    }
    let blobs_path = dir.join("blobs.json");
    let blobs: Vec<BlobEntry> = serde_json::from_str(
        &std::fs::read_to_string(&blobs_path).map_err(|e| Error::io(&blobs_path, e))?,
    )?;
    let bin = dir.join("tensors.bin");
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut tensors = BTreeMap::new();
    for b in blobs {
        let n: usize = b.shape.iter().product();
        let start = b.offset as usize;
        let end = start + 4 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("blob {} lies outside tensors.bin", b.name)))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(b.name, Tensor::from_vec(values, b.shape, &Device::Cpu)?);
    }
    Ok(Checkpoint { meta, tensors })
}

impl Checkpoint {
    /// Copies stored values into `params`; every parameter must be present with its shape.
    pub fn restore_params(&self, params: &Params) -> Result<()> {
        for name in params.names() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            params.assign(&name, &t.to_device(params.device())?)?;
        }
        Ok(())
    }

    /// Optimizer moments stored alongside the parameters.
    pub fn adam_moments(&self) -> BTreeMap<String, Moments> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.tensors {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                if let Some(v) = self.tensors.get(&format!("{ADAM_V}{p}")) {
                    out.insert(
                        p.to_string(),
                        Moments {
                            m: m.clone(),
                            v: v.clone(),
                        },
                    );
                }
            }
        }
        out
    }
}

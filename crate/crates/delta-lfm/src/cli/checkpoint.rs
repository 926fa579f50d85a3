//! Self-describing model checkpoints.
//!
//! Layout: the magic bytes `DLFM1`, a little-endian u64 giving the length
//! of the UTF-8 JSON header, the header itself (tensor table, model
//! configs, provenance), then every tensor's values concatenated as
//! little-endian f64 in header order. Saving is deterministic, so
//! save / load / save round-trips byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::flow::{FlowConfig, VelocityNetParams, FLOW_PARAM_NAMES};
use crate::gradcore::Tensor;
use crate::integrate::ModelBundle;
use crate::latent::{ArcRankConfig, AutoencoderConfig, AutoencoderParams, AE_PARAM_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DLFM1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where one tensor sits in the payload; `offset` counts f64 elements
/// from the payload start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// How the checkpointed model was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the experiment config that drove training.
    pub config_hash: String,
    pub seed: u64,
    pub ae_epochs: usize,
    pub flow_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub provenance: Provenance,
    pub ae_config: AutoencoderConfig,
    pub arcrank: ArcRankConfig,
    pub flow_config: Option<FlowConfig>,
    pub tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: always the autoencoder, plus the velocity net
/// once flow training has happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub autoencoder: AutoencoderParams,
    pub velocity: Option<VelocityNetParams>,
}

impl Checkpoint {
    /// The inference bundle; errors if the velocity net is missing.
    pub fn bundle(&self) -> Result<ModelBundle> {
        let velocity = self.velocity.clone().ok_or_else(|| {
            DlfmError::InvalidInput(
                "checkpoint has no velocity net; run flow training first".into(),
            )
        })?;
        Ok(ModelBundle { autoencoder: self.autoencoder.clone(), velocity })
    }
}

fn push_tensor(
    tensors: &mut Vec<TensorMeta>,
    payload: &mut Vec<u8>,
    name: String,
    tensor: &Tensor,
) {
    let offset = payload.len() / 8;
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    tensors.push(TensorMeta { name, rows: tensor.rows(), cols: tensor.cols(), offset });
}

/// Writes a checkpoint. `velocity` is absent after autoencoder-only
/// training.
pub fn save_checkpoint(
    path: &Path,
    autoencoder: &AutoencoderParams,
    velocity: Option<&VelocityNetParams>,
    arcrank: &ArcRankConfig,
    provenance: &Provenance,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in AE_PARAM_NAMES.iter().zip(autoencoder.params()) {
        push_tensor(&mut tensors, &mut payload, format!("ae.{name}"), tensor);
    }
    if let Some(vel) = velocity {
        for (name, tensor) in FLOW_PARAM_NAMES.iter().zip(vel.params()) {
            push_tensor(&mut tensors, &mut payload, format!("flow.{name}"), tensor);
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        provenance: provenance.clone(),
        ae_config: autoencoder.config.clone(),
        arcrank: arcrank.clone(),
        flow_config: velocity.map(|v| v.config.clone()),
        tensors,
    };
    let header_json = serde_json::to_string(&header)?;

    let mut bytes = Vec::with_capacity(5 + 8 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_json.as_bytes());
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| DlfmError::io(format!("creating {}", parent.display()), e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| DlfmError::io(format!("writing {}", path.display()), e))
}

fn read_tensor(payload: &[u8], meta: &TensorMeta) -> Result<Tensor> {
    let n = meta.rows * meta.cols;
    let start = meta.offset * 8;
    let end = start + n * 8;
    if end > payload.len() {
        return Err(DlfmError::Format(format!(
            "tensor {} overruns the checkpoint payload",
            meta.name
        )));
    }
    let values: Vec<f64> = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(meta.rows, meta.cols, values)
}

/// Rebuilds a parameter set by consuming tensors in declaration order,
/// verifying each recorded name against the expected prefix and slot.
fn take_tensors<'a>(
    metas: &mut std::slice::Iter<'a, TensorMeta>,
    payload: &[u8],
    prefix: &str,
    names: &[&str],
) -> Result<Vec<Tensor>> {
    names
        .iter()
        .map(|name| {
            let meta = metas.next().ok_or_else(|| {
                DlfmError::Format(format!("checkpoint is missing tensor {prefix}.{name}"))
            })?;
            let expected = format!("{prefix}.{name}");
            if meta.name != expected {
                return Err(DlfmError::Format(format!(
                    "checkpoint tensor order mismatch: expected {expected}, found {}",
                    meta.name
                )));
            }
            read_tensor(payload, meta)
        })
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| DlfmError::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(DlfmError::Format(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    if 13 + header_len > bytes.len() {
        return Err(DlfmError::Format("checkpoint header overruns the file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[13..13 + header_len])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(DlfmError::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let payload = &bytes[13 + header_len..];

    let mut metas = header.tensors.iter();
    let ae_tensors = take_tensors(&mut metas, payload, "ae", &AE_PARAM_NAMES)?;
    let mut autoencoder = AutoencoderParams::init(&header.ae_config, 0)?;
    for (slot, tensor) in autoencoder.params_mut().into_iter().zip(ae_tensors) {
        if slot.shape() != tensor.shape() {
            return Err(DlfmError::Format(format!(
                "autoencoder tensor shape {:?} does not match config shape {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }

    let velocity = match &header.flow_config {
        None => None,
        Some(flow_config) => {
            let flow_tensors = take_tensors(&mut metas, payload, "flow", &FLOW_PARAM_NAMES)?;
            let mut vel = VelocityNetParams::init(flow_config, 0)?;
            for (slot, tensor) in vel.params_mut().into_iter().zip(flow_tensors) {
                if slot.shape() != tensor.shape() {
                    return Err(DlfmError::Format(format!(
                        "velocity tensor shape {:?} does not match config shape {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor;
            }
            Some(vel)
        }
    };
    if metas.next().is_some() {
        return Err(DlfmError::Format("checkpoint lists more tensors than expected".into()));
    }
    Ok(Checkpoint { header, autoencoder, velocity })
}

//! Binary checkpoint: `"VAEC"`, u32 version, u32 JSON length, JSON metadata,
//! then every parameter as a little-endian f64 in declared layer order
//! (encoder then decoder; per layer, weights row-major then biases).
//! Header integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{VaeModel, VaeSpec};
use crate::nn::{DenseNet, LayerSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a VAE checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which training images produced a model, so probes can rebuild the same set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub held_out: Option<u8>,
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub image_count: usize,
    /// [`crate::mnist::dataset_id`] of the exact training images.
    pub dataset_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: VaeSpec,
    pub encoder_layers: Vec<LayerSpec>,
    pub decoder_layers: Vec<LayerSpec>,
    pub seed: u64,
    pub parameter_count: usize,
    #[serde(default)]
    pub training_data: Option<TrainingData>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub training_data: Option<TrainingData>,
}

pub fn encode_checkpoint(model: &VaeModel, training_data: Option<&TrainingData>) -> Vec<u8> {
    let meta = CheckpointMeta {
        spec: model.spec().clone(),
        encoder_layers: model.encoder().layer_specs(),
        decoder_layers: model.decoder().layer_specs(),
        seed: model.spec().seed,
        parameter_count: model.parameter_count(),
        training_data: training_data.cloned(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let params = model.to_flat();
    let mut out = Vec::with_capacity(12 + json.len() + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing magic".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("missing header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let json_len = word(8) as usize;
    let body = &bytes[12..];
    if body.len() < json_len {
        return Err(CheckpointError::Truncated(format!(
            "metadata declares {json_len} bytes, {} present",
            body.len()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[..json_len])
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    if meta.encoder_layers != meta.spec.encoder_layers() || meta.decoder_layers != meta.spec.decoder_layers() {
        return Err(CheckpointError::Malformed(
            "layer shapes disagree with the spec".into(),
        ));
    }
    let params = &body[json_len..];
    let expected = meta.spec.parameter_count();
    if expected != meta.parameter_count {
        return Err(CheckpointError::Malformed(format!(
            "metadata declares {} parameters, spec implies {expected}",
            meta.parameter_count
        )));
    }
    if params.len() < expected * 8 {
        return Err(CheckpointError::Truncated(format!(
            "{} parameter bytes, {} expected",
            params.len(),
            expected * 8
        )));
    }
    if params.len() > expected * 8 {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameters",
            params.len() - expected * 8
        )));
    }
    let values: Vec<f64> = params
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let spec: VaeSpec = meta.spec;
    let mut encoder = DenseNet::zeros(&spec.encoder_layers())
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut decoder = DenseNet::zeros(&spec.decoder_layers())
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let (enc, dec) = values.split_at(encoder.parameter_count());
    encoder
        .set_flat(enc)
        .and_then(|_| decoder.set_flat(dec))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let model = VaeModel::from_parts(spec, encoder, decoder)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint {
        model,
        training_data: meta.training_data,
    })
}

pub fn save_checkpoint(
    model: &VaeModel,
    training_data: Option<&TrainingData>,
    path: &Path,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(model, training_data)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

//! Checkpoint persistence: a JSON header (version, configs, vocabulary, tag
//! codebook, tensor manifest) followed by raw little-endian f64 arrays.
//! Round-trips are bit-exact; a version mismatch is rejected, never migrated.

use crate::embed::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpeechActModel};
use crate::output::ActTag;
use crate::params::Params;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SARCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_config: Value,
    config_hash: String,
    vocab: Vec<String>,
    tags: Vec<String>,
    tensors: Vec<TensorRecord>,
}

/// FNV-1a over the canonical JSON encoding of both configs.
fn config_hash(model_config: &ModelConfig, train_config: &Value) -> Result<String> {
    let canonical = format!(
        "{}|{}",
        serde_json::to_string(model_config)?,
        serde_json::to_string(train_config)?
    );
    Ok(format!("{:016x}", crate::rng::name_tag(&canonical)))
}

/// Write a model plus the training config that produced it.
pub fn save(model: &SpeechActModel, train_config: &Value, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0usize;
    for e in model.params.entries() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape.clone(),
            offset,
            count: e.value.numel(),
        });
        offset += e.value.numel();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        train_config: train_config.clone(),
        config_hash: config_hash(&model.config, train_config)?,
        vocab: model.vocab.tokens().to_vec(),
        tags: ActTag::ALL.iter().map(|t| t.as_str().to_string()).collect(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for e in model.params.entries() {
        for v in &e.value.data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a checkpoint back into a model; returns the training-config echo.
pub fn load(path: &Path) -> Result<(SpeechActModel, Value)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let expected_tags: Vec<String> = ActTag::ALL.iter().map(|t| t.as_str().to_string()).collect();
    if header.tags != expected_tags {
        return Err(Error::Checkpoint(format!(
            "tag codebook {:?} does not match {:?}",
            header.tags, expected_tags
        )));
    }

    let vocab = Vocabulary::from_tokens(header.vocab)?;
    // build a skeleton with the right parameter layout, then overwrite values
    let (mut model, _) = SpeechActModel::new(header.model_config.clone(), vocab, 0, None)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut seen = 0usize;
    for rec in &header.tensors {
        let id = model.params.id(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown tensor {} in manifest", rec.name))
        })?;
        let value = model.params.value_mut(id);
        if value.shape != rec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                rec.name, rec.shape, value.shape
            )));
        }
        let start = rec.offset * 8;
        let end = start + rec.count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated at tensor {}",
                rec.name
            )));
        }
        for (j, chunk) in payload[start..end].chunks_exact(8).enumerate() {
            value.data[j] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest covers {seen} of {} parameters",
            model.params.len()
        )));
    }
    Ok((model, header.train_config))
}

/// Bit-exact view of the stored tensors, keyed by name (test support).
pub fn tensor_bits(params: &Params) -> Vec<(String, Vec<u64>)> {
    params
        .entries()
        .iter()
        .map(|e| {
            (
                e.name.clone(),
                e.value.data.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

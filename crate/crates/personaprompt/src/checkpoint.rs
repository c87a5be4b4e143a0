//! The checkpoint container shared by base models and persona prompts.
//!
//! Layout: the 8-byte magic `PFCKPT01`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON ([`Header`]), then every tensor as
//! little-endian `f32` in manifest order. Offsets are relative to the start
//! of the payload. A file is validated completely before anything is built
//! from it.

use std::path::Path;

use personaprompt_core::model::{DecoderLM, ModelConfig};
use personaprompt_core::prompt::{PersonaPrompt, PromptInit};
use personaprompt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

pub const MAGIC: &[u8; 8] = b"PFCKPT01";
/// The first six magic bytes name the format; the last two its version.
const MAGIC_NAME_LEN: usize = 6;
pub const FORMAT_VERSION: u32 = 1;
pub const PROMPT_TENSOR: &str = "persona_prompt";
const PREAMBLE: usize = MAGIC.len() + 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0:?}")]
    UnsupportedVersion(String),
    #[error("checkpoint truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("unreadable checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: Kind, found: Kind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Prompt,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kind::Model => "model",
            Kind::Prompt => "prompt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptMeta {
    pub persona_id: String,
    pub init_source: Vec<String>,
    pub init: PromptInit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// A fully validated checkpoint: its header and each manifest tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn encode(mut header: Header, tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut offset = 0u64;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let nbytes = t.numel() as u64 * 4;
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, nbytes };
            offset += nbytes;
            e
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

fn truncated(needed: u64, actual: usize) -> CheckpointError {
    CheckpointError::Truncated { needed, actual: actual as u64 }
}

/// Parses and validates `bytes` without interpreting the tensors.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let name_len = MAGIC_NAME_LEN.min(bytes.len());
    if bytes[..name_len] != MAGIC[..name_len] {
        return Err(CheckpointError::BadMagic(bytes[..name_len].to_vec()));
    }
    if bytes.len() < MAGIC.len() {
        return Err(truncated(MAGIC.len() as u64, bytes.len()));
    }
    if bytes[MAGIC_NAME_LEN..MAGIC.len()] != MAGIC[MAGIC_NAME_LEN..] {
        return Err(CheckpointError::UnsupportedVersion(
            String::from_utf8_lossy(&bytes[MAGIC_NAME_LEN..MAGIC.len()]).into_owned(),
        ));
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated(PREAMBLE as u64, bytes.len()));
    }
    let header_len = u64::from_le_bytes(bytes[MAGIC.len()..PREAMBLE].try_into().expect("8 bytes"));
    let payload_start = (PREAMBLE as u64).checked_add(header_len).ok_or_else(|| truncated(u64::MAX, bytes.len()))?;
    if (bytes.len() as u64) < payload_start {
        return Err(truncated(payload_start, bytes.len()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start as usize])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version.to_string()));
    }
    let payload = &bytes[payload_start as usize..];

    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let want = numel.and_then(|n| n.checked_mul(4));
        if want != Some(e.nbytes) {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {:?} has shape {:?} but {} bytes",
                e.name, e.shape, e.nbytes
            )));
        }
        if e.offset != expected_offset {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {:?} starts at {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        expected_offset += e.nbytes;
    }
    if (payload.len() as u64) < expected_offset {
        return Err(truncated(payload_start + expected_offset, bytes.len()));
    }
    if payload.len() as u64 > expected_offset {
        return Err(CheckpointError::ManifestMismatch(format!(
            "{} trailing bytes after the last tensor",
            payload.len() as u64 - expected_offset
        )));
    }

    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::ManifestMismatch(err.to_string()))?;
            Ok((e.name.clone(), t))
        })
        .collect::<Result<_, CheckpointError>>()?;
    Ok(Checkpoint { header, tensors })
}

fn expect_kind(header: &Header, expected: Kind) -> Result<(), CheckpointError> {
    if header.kind == expected {
        Ok(())
    } else {
        Err(CheckpointError::WrongKind { expected, found: header.kind })
    }
}

pub fn encode_model(model: &DecoderLM<f32>) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: Kind::Model,
        model_config: Some(model.config),
        frozen: Some(model.is_frozen()),
        prompt: None,
        tensors: Vec::new(),
    };
    encode(header, &model.named_parameters())
}

pub fn decode_model(bytes: &[u8]) -> Result<DecoderLM<f32>, CheckpointError> {
    let ck = decode(bytes)?;
    expect_kind(&ck.header, Kind::Model)?;
    let config = ck
        .header
        .model_config
        .ok_or_else(|| CheckpointError::ManifestMismatch("model checkpoint without model_config".into()))?;
    let frozen = ck.header.frozen.unwrap_or(true);
    DecoderLM::from_parameters(config, ck.tensors, frozen).map_err(|e| CheckpointError::ManifestMismatch(e.to_string()))
}

pub fn encode_prompt(prompt: &PersonaPrompt<f32>) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: Kind::Prompt,
        model_config: None,
        frozen: None,
        prompt: Some(PromptMeta {
            persona_id: prompt.persona_id.clone(),
            init_source: prompt.init_source.clone(),
            init: prompt.init,
        }),
        tensors: Vec::new(),
    };
    encode(header, &[(PROMPT_TENSOR.to_string(), prompt.matrix())])
}

pub fn decode_prompt(bytes: &[u8]) -> Result<PersonaPrompt<f32>, CheckpointError> {
    let ck = decode(bytes)?;
    expect_kind(&ck.header, Kind::Prompt)?;
    let meta = ck
        .header
        .prompt
        .ok_or_else(|| CheckpointError::ManifestMismatch("prompt checkpoint without prompt metadata".into()))?;
    let mut tensors = ck.tensors;
    if tensors.len() != 1 || tensors[0].0 != PROMPT_TENSOR {
        let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        return Err(CheckpointError::ManifestMismatch(format!(
            "prompt checkpoint must hold exactly {PROMPT_TENSOR:?}, found {names:?}"
        )));
    }
    let (_, matrix) = tensors.pop().expect("one tensor");
    PersonaPrompt::from_parts(matrix, meta.persona_id, meta.init_source, meta.init)
        .map_err(|e| CheckpointError::ManifestMismatch(e.to_string()))
}

pub fn save_model(path: impl AsRef<Path>, model: &DecoderLM<f32>) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DecoderLM<f32>> {
    Ok(decode_model(&read_bytes(path)?)?)
}

pub fn save_prompt(path: impl AsRef<Path>, prompt: &PersonaPrompt<f32>) -> Result<()> {
    write_atomic(path, &encode_prompt(prompt))
}

pub fn load_prompt(path: impl AsRef<Path>) -> Result<PersonaPrompt<f32>> {
    Ok(decode_prompt(&read_bytes(path)?)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&read_bytes(path)?).map_err(Error::from)
}

#[cfg(test)]
mod tests;

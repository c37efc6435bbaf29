//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the parameters as little-endian `f32`, optionally the optimizer
//! moments, and a SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, AdamConfig};
use super::unet::{ModelConfig, UNet};
use crate::error::{DipsError, Result};

const MAGIC: &[u8; 8] = b"DIPSLOC\0";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dips-localizer";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    slots: Vec<(String, Vec<usize>)>,
    param_count: usize,
    optimizer: Option<(AdamConfig, u64)>,
    epoch: u64,
    step: u64,
    meta: serde_json::Value,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UNet,
    pub optimizer: Option<Adam>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Trainer state such as seeds and best validation score.
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> DipsError {
    DipsError::Checkpoint(msg.into())
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], count: usize, at: &mut usize) -> Result<Vec<f32>> {
    let end = *at + count * 4;
    let chunk = bytes.get(*at..end).ok_or_else(|| corrupt("truncated tensor data"))?;
    *at = end;
    Ok(chunk
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            config: self.model.config().clone(),
            slots: self
                .model
                .slots()
                .iter()
                .map(|s| (s.name.clone(), s.shape.clone()))
                .collect(),
            param_count: self.model.parameter_count(),
            optimizer: self.optimizer.as_ref().map(|a| (a.cfg, a.step)),
            epoch: self.epoch,
            step: self.step,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        push_f32s(&mut buf, self.model.params());
        if let Some(adam) = &self.optimizer {
            if adam.num_params() != self.model.parameter_count() {
                return Err(corrupt("optimizer state does not match the model"));
            }
            push_f32s(&mut buf, &adam.m);
            push_f32s(&mut buf, &adam.v);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        // write-then-rename so a crash never leaves a half-written file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a localizer checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = body
            .get(20..20 + header_len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(corrupt(format!("unexpected format tag {:?}", header.format)));
        }
        let mut model = UNet::new(header.config.clone()).map_err(|e| corrupt(format!("bad config: {e}")))?;
        let layout: Vec<(String, Vec<usize>)> = model
            .slots()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect();
        if layout != header.slots || header.param_count != model.parameter_count() {
            return Err(corrupt("parameter layout does not match the stored config"));
        }
        let mut at = 20 + header_len;
        let n = model.parameter_count();
        model.set_params(read_f32s(body, n, &mut at)?)?;
        let optimizer = match header.optimizer {
            Some((cfg, step)) => {
                let m = read_f32s(body, n, &mut at)?;
                let v = read_f32s(body, n, &mut at)?;
                Some(Adam { cfg, step, m, v })
            }
            None => None,
        };
        if at != body.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists on an exact configuration match.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.model.config() != expected {
            return Err(corrupt(format!(
                "checkpoint was built for {:?}, expected {:?}",
                ckpt.model.config(),
                expected
            )));
        }
        Ok(ckpt)
    }
}

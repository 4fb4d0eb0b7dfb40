//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPSA"  u32 version  u32 config_len  config (TOML, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  u64 dims[rank]  f32 data[∏dims]
//! ```
//!
//! Tensors are written in the network's visiting order and matched by name
//! on load.

use std::collections::HashMap;
use std::path::Path;

use dpsarnn_core::dualpath::{EnhancementNetwork, ModelConfig};
use dpsarnn_core::nn::Module;

pub const MAGIC: &[u8; 4] = b"DPSA";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("invalid configuration record: {0}")]
    Config(String),
    #[error("tensor {0} missing from model file")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in model file")]
    UnknownTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
}

pub fn encode(net: &EnhancementNetwork<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = toml::to_string(&net.config).expect("model config serialises");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = net.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a model; the returned network is frozen for evaluation.
pub fn decode(bytes: &[u8]) -> Result<EnhancementNetwork<f32>, CheckpointError> {
    let mut c = Cursor(bytes);
    if c.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut net = EnhancementNetwork::<f32>::zeros(&config).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = c.u32()? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8_lossy(c.take(n)?).into_owned();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        stored.insert(name, (dims, data));
    }
    if !c.0.is_empty() {
        return Err(CheckpointError::TrailingBytes(c.0.len()));
    }

    let mut err = None;
    net.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match stored.remove(&name) {
            None => err = Some(CheckpointError::MissingTensor(name)),
            Some((dims, _)) if dims != t.shape() => {
                err = Some(CheckpointError::Shape { name, found: dims, expected: t.shape().to_vec() })
            }
            Some((_, data)) => t.data_mut().copy_from_slice(&data),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = stored.into_keys().min() {
        return Err(CheckpointError::UnknownTensor(name));
    }
    net.freeze();
    Ok(net)
}

pub fn save(path: impl AsRef<Path>, net: &EnhancementNetwork<f32>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode(net)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: impl AsRef<Path>) -> Result<EnhancementNetwork<f32>, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

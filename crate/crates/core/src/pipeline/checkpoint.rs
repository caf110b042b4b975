//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header, raw
//! little-endian tensor bytes, then a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::optim::AdamW;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSTKCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Encoder and multi-step decoder.
    Stage1,
    /// Frozen encoder, distilled decoder and discriminator.
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: CheckpointKind,
    step: u64,
    model: ModelConfig,
    model_fingerprint: String,
    run_config: serde_json::Value,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub model: ModelConfig,
    pub run_config: serde_json::Value,
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, step: u64, model: &ModelConfig, run_config: serde_json::Value) -> Self {
        Self {
            kind,
            step,
            model: model.clone(),
            run_config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Whether any tensor is stored under `prefix.`.
    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn insert_vars(&mut self, prefix: &str, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().expect("var map lock poisoned");
        for (name, var) in data.iter() {
            self.tensors
                .insert(format!("{prefix}.{name}"), var.as_tensor().detach().copy()?);
        }
        Ok(())
    }

    /// Copies stored values into every variable of `vars`; all must be present with matching shapes.
    pub fn load_vars(&self, prefix: &str, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().expect("var map lock poisoned");
        for (name, var) in data.iter() {
            let key = format!("{prefix}.{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {key}")))?;
            if t.dims() != var.as_tensor().dims() {
                return Err(Error::Incompatible(format!(
                    "{key}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(var.as_tensor().dtype())?.to_device(var.as_tensor().device())?)?;
        }
        Ok(())
    }

    pub fn insert_optimizer(&mut self, prefix: &str, opt: &AdamW) -> Result<()> {
        let (step, state) = opt.state();
        for (name, t) in state {
            self.tensors.insert(format!("{prefix}.{name}"), t.copy()?);
        }
        self.meta.insert(format!("{prefix}.step"), step.into());
        self.meta.insert(format!("{prefix}.lr"), opt.params().lr.into());
        Ok(())
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut AdamW) -> Result<()> {
        let step = self
            .meta
            .get(&format!("{prefix}.step"))
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no optimizer state {prefix}")))?;
        opt.load_state(step, |n| self.tensors.get(&format!("{prefix}.{n}")).cloned())
    }

    /// Fails unless the stored model configuration matches `config`.
    pub fn ensure_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.model.fingerprint() != config.fingerprint() {
            return Err(Error::Incompatible(format!(
                "checkpoint model fingerprint {} does not match {}",
                self.model.fingerprint(),
                config.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let flat = t.flatten_all()?;
            let offset = payload.len();
            let dtype = match t.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f64"
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    "f32"
                }
            };
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.into(),
                shape: t.dims().to_vec(),
                offset,
                nbytes: payload.len() - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind,
            step: self.step,
            model: self.model.clone(),
            model_fingerprint: self.model.fingerprint(),
            run_config: self.run_config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint or truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        if 12 + hlen > body.len() {
            return Err(Error::Integrity("header length exceeds file".into()));
        }
        let raw: serde_json::Value = serde_json::from_slice(&body[12..12 + hlen])?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header: Header = serde_json::from_value(raw)?;
        if header.model_fingerprint != header.model.fingerprint() {
            return Err(Error::Integrity("model fingerprint does not match stored config".into()));
        }
        let payload = &body[12 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(Error::Integrity(format!("tensor {} extends past payload", e.name)));
            }
            let bytes = &payload[e.offset..end];
            let n: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f64" if e.nbytes == n * 8 => {
                    let v: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                "f32" if e.nbytes == n * 4 => {
                    let v: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), device)?
                }
                other => {
                    return Err(Error::Integrity(format!("tensor {} has bad dtype/size {other}", e.name)));
                }
            };
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            model: header.model,
            run_config: header.run_config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    Checkpoint::load(path, device)
}

//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"MITU"`, `u32` format version, `u32` header
//! length, JSON header, then every tensor's values as `f32` in manifest
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MitUNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MITU";
pub const FORMAT_VERSION: u32 = 1;

/// Free-form provenance recorded with a checkpoint (split seed, metrics, …).
pub type CheckpointMeta = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: CheckpointMeta,
}

/// A model snapshot: config echo, named tensors and a step counter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &MitUNet<T>, step: u64, meta: CheckpointMeta) -> Self {
        let p = model.params();
        let zip = |names: &[String], ts: &[Tensor<T>]| {
            names.iter().cloned().zip(ts.iter().map(Tensor::cast::<f32>)).collect()
        };
        Self {
            config: model.config().clone(),
            step,
            tensors: zip(p.names(), p.tensors()),
            buffers: zip(p.buffer_names(), p.buffers()),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let all = self.tensors.iter().map(|e| (e, false)).chain(self.buffers.iter().map(|e| (e, true)));
        for ((name, t), buffer) in all.clone() {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                buffer,
            });
            offset += t.numel();
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ck_err(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for ((_, t), _) in all {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(ck_err("not a checkpoint (missing MITU magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ck_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| ck_err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ck_err(format!("bad header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let mut tensors = Vec::new();
        let mut buffers = Vec::new();
        let mut expected = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(ck_err(format!("tensor {} has offset {} (expected {expected})", e.name, e.offset)));
            }
            let raw = payload
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| ck_err(format!("payload truncated in {}", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| ck_err(format!("{}: {err}", e.name)))?;
            if e.buffer {
                buffers.push((e.name.clone(), t));
            } else {
                tensors.push((e.name.clone(), t));
            }
            expected += n;
        }
        if payload.len() != 4 * expected {
            return Err(ck_err(format!("payload has {} trailing bytes", payload.len() - 4 * expected)));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            tensors,
            buffers,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every tensor into `model`. Names and shapes must match the
    /// model's manifest exactly.
    pub fn load_into<T: Scalar>(&self, model: &mut MitUNet<T>) -> Result<()> {
        let store = model.params_mut();
        let check = |want: &[String], have: &[(String, Tensor<f32>)], what: &str| -> Result<()> {
            let have_names: Vec<&String> = have.iter().map(|(n, _)| n).collect();
            if want.len() != have.len() || want.iter().zip(&have_names).any(|(a, b)| a != *b) {
                let missing: Vec<_> = want.iter().filter(|n| !have_names.contains(n)).take(3).collect();
                let extra: Vec<_> = have_names.iter().filter(|n| !want.contains(n)).take(3).collect();
                return Err(ck_err(format!(
                    "{what} names differ from the model manifest (missing {missing:?}, unexpected {extra:?})"
                )));
            }
            Ok(())
        };
        check(store.names(), &self.tensors, "parameter")?;
        check(store.buffer_names(), &self.buffers, "buffer")?;
        for (dst, (name, src)) in store.tensors_mut().iter_mut().zip(&self.tensors) {
            if dst.shape() != src.shape() {
                return Err(ck_err(format!("{name}: shape {:?} vs model {:?}", src.shape(), dst.shape())));
            }
            *dst = src.cast();
        }
        for (dst, (name, src)) in store.buffers_mut().iter_mut().zip(&self.buffers) {
            if dst.shape() != src.shape() {
                return Err(ck_err(format!("{name}: shape {:?} vs model {:?}", src.shape(), dst.shape())));
            }
            *dst = src.cast();
        }
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn to_model<T: Scalar>(&self) -> Result<MitUNet<T>> {
        let mut m = MitUNet::new(self.config.clone(), 0)?;
        self.load_into(&mut m)?;
        Ok(m)
    }
}

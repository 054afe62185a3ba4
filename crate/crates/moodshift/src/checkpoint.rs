//! Model checkpoints: a binary parameter blob plus a JSON sidecar.
//!
//! `params.bin` layout (little endian): magic `MSPARAM1`, `u32` entry count,
//! then per entry `u32` name length, name bytes, `u8` trainable flag, `u32`
//! rank, `u64` per dimension and the `f64` values.

use std::fs;
use std::path::Path;

use moodshift_core::data::ChunkDataset;
use moodshift_core::models::{ModelConfig, Network, TrainedModel, TrainingMeta};
use moodshift_core::nn::ParamStore;
use moodshift_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, IoContext, Result};
use crate::ingest::{read_json, write_json};

pub const PARAMS_FILE: &str = "params.bin";
pub const MODEL_FILE: &str = "model.json";
const MAGIC: &[u8; 8] = b"MSPARAM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub architecture: String,
    pub attention: String,
    pub class_order: [i8; 3],
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    pub data_fingerprint: String,
    pub params_sha256: String,
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.trainable));
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AppError::data("parameter blob is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes `(name, trainable, value)` triples.
pub fn decode_params(buf: &[u8]) -> Result<Vec<(String, bool, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AppError::data("not a parameter blob (bad magic)"));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| AppError::data("parameter name is not UTF-8"))?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, trainable, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(AppError::data("trailing bytes after parameter blob"));
    }
    Ok(out)
}

/// SHA-256 over the chunk manifest and every frame value used by `data`.
pub fn data_fingerprint(data: &ChunkDataset) -> String {
    let mut h = Sha256::new();
    for c in data.chunks() {
        h.update(serde_json::to_vec(c).expect("chunk rows serialise"));
    }
    let store = data.frame_store();
    for vid in store.video_ids() {
        h.update(vid.as_bytes());
        for f in store.frames(vid).unwrap_or_default() {
            for v in f.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn save_model(dir: &Path, model: &TrainedModel, data_fingerprint: &str) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let blob = encode_params(model.network.params());
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &blob).at(&p)?;
    let cfg = *model.network.config();
    let sidecar = ModelSidecar {
        architecture: cfg.architecture.tag().into(),
        attention: cfg.attention.tag().into(),
        class_order: [-1, 0, 1],
        config: cfg,
        meta: model.meta.clone(),
        data_fingerprint: data_fingerprint.into(),
        params_sha256: hex::encode(Sha256::digest(&blob)),
    };
    write_json(&dir.join(MODEL_FILE), &sidecar)
}

pub fn load_model(dir: &Path) -> Result<(TrainedModel, ModelSidecar)> {
    let sidecar: ModelSidecar = read_json(&dir.join(MODEL_FILE))?;
    let p = dir.join(PARAMS_FILE);
    let blob = fs::read(&p).at(&p)?;
    if hex::encode(Sha256::digest(&blob)) != sidecar.params_sha256 {
        return Err(AppError::data(format!("{}: checksum does not match {MODEL_FILE}", p.display())));
    }
    let mut network = Network::new(&sidecar.config, 0)?;
    let entries = decode_params(&blob)?;
    if entries.len() != network.params().len() {
        return Err(AppError::data(format!(
            "checkpoint has {} tensors, architecture expects {}",
            entries.len(),
            network.params().len()
        )));
    }
    for (name, _, value) in entries {
        network.params_mut().assign(&name, value)?;
    }
    Ok((
        TrainedModel {
            network,
            meta: sidecar.meta.clone(),
        },
        sidecar,
    ))
}

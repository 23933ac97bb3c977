//! Little-endian checkpoint container:
//!
//! ```text
//! "PSUN" | u32 version | u32 len, config JSON | u32 len, metadata JSON
//! u32 tensor count | per tensor: u32 len, name | 4 x u32 shape | f32 data
//! u8 has_adam | [u64 step | per tensor: f32 m | f32 v]
//! u32 CRC-32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::error::{CheckpointError, Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, ParamStore, PsuNet};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"PSUN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
    pub loss_tail: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PsuNet,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_block(&mut out, &serde_json::to_vec(ckpt.model.config())?);
    put_block(&mut out, &serde_json::to_vec(&ckpt.meta)?);
    let params = ckpt.model.params();
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params {
        put_block(&mut out, name.as_bytes());
        for d in t.shape().dims() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    match &ckpt.adam {
        None => out.push(0),
        Some(state) => {
            state.check_matches(params)?;
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for name in params.keys() {
                put_f32s(&mut out, state.m[name].data());
                put_f32s(&mut out, state.v[name].data());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn block(&mut self, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn f32s(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(
            n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(CheckpointError::Corrupt(msg.to_string()))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(buf) {
            CheckpointError::Truncated("magic")
        } else {
            CheckpointError::BadMagic
        }
        .into());
    }
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let config: ModelConfig =
        serde_json::from_slice(r.block("config")?).map_err(|e| corrupt(format!("config: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.block("metadata")?)
        .map_err(|e| corrupt(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.block("tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|_| corrupt(format!("{name}: zero dimension")))?;
        let data = r.f32s(shape.numel(), "tensor data")?;
        if params
            .insert(name.clone(), Tensor::from_vec(shape, data)?)
            .is_some()
        {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    let adam = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
            for (name, p) in &params {
                m.insert(
                    name.clone(),
                    Tensor::from_vec(p.shape(), r.f32s(p.numel(), "optimizer moments")?)?,
                );
                v.insert(
                    name.clone(),
                    Tensor::from_vec(p.shape(), r.f32s(p.numel(), "optimizer moments")?)?,
                );
            }
            Some(AdamState { step, m, v })
        }
        flag => return Err(corrupt(format!("optimizer flag {flag}"))),
    };
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if crc32fast::hash(&buf[..body_end]) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let model = PsuNet::from_parts(config, params).map_err(corrupt)?;
    Ok(Checkpoint { model, adam, meta })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(field) = expected.first_difference(ckpt.model.config()) {
        return Err(CheckpointError::ConfigMismatch(field.to_string()).into());
    }
    Ok(ckpt)
}

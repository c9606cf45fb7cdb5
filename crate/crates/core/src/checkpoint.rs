//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CWGANCKP"
//! version      u32
//! fingerprint  32 bytes SHA-256 of the architecture description
//! header_len   u64, then header_len bytes of JSON (counters, rng, config)
//! count        u32, then per tensor:
//!   name_len u32, name (UTF-8), rank u32, dims u64 * rank, data f32 * numel
//! digest       32 bytes SHA-256 of everything above
//! ```

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use haze_autograd::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{write_atomic, StreamCursor};
use crate::error::{Error, Result};
use crate::networks::{Critic, Generator, Param};
use crate::optim::{Adam, AdamConfig};
use crate::trainer::{architecture_description, architecture_fingerprint, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CWGANCKP";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 32 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub config: TrainConfig,
    pub generator_steps: u64,
    pub critic_steps: u64,
    pub stage_start: u64,
    pub generator_cursor: StreamCursor,
    pub critic_cursor: StreamCursor,
    pub alpha_rng: ChaCha8Rng,
    pub generator_adam: AdamMeta,
    pub critic_adam: AdamMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub steps: u64,
}

/// The part of a checkpoint readable without touching tensor data.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub fingerprint: [u8; 32],
    pub header: CheckpointHeader,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn add_network<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, params: &'a [Param], adam: &'a Adam) {
    for (i, p) in params.iter().enumerate() {
        out.push((format!("{prefix}/{}", p.name), &p.value));
        out.push((format!("{prefix}.adam_m/{}", p.name), &adam.m[i]));
        out.push((format!("{prefix}.adam_v/{}", p.name), &adam.v[i]));
    }
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    add_network(&mut out, "generator", state.generator.params(), &state.generator_adam);
    add_network(&mut out, "critic", state.critic.params(), &state.critic_adam);
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        architecture: architecture_description(&state.config.generator, &state.config.critic),
        config: state.config.clone(),
        generator_steps: state.generator_steps,
        critic_steps: state.critic_steps,
        stage_start: state.stage_start,
        generator_cursor: state.generator_cursor,
        critic_cursor: state.critic_cursor,
        alpha_rng: state.alpha_rng.clone(),
        generator_adam: AdamMeta {
            config: state.generator_adam.config,
            steps: state.generator_adam.steps,
        },
        critic_adam: AdamMeta {
            config: state.critic_adam.config,
            steps: state.critic_adam.steps,
        },
    };
    let json = serde_json::to_vec(&header)?;
    let tensors = named_tensors(state);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&state.fingerprint);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state)?)
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::CheckpointIntegrity(msg.into())
}

/// Checks magic and version of the fixed-size prefix; returns the
/// fingerprint and header length.
fn parse_prefix(prefix: &[u8]) -> Result<([u8; 32], u64)> {
    if prefix.len() < PREFIX_LEN {
        return Err(integrity("file is shorter than the checkpoint prefix"));
    }
    if &prefix[..8] != MAGIC {
        return Err(integrity("wrong magic bytes; not a checkpoint"));
    }
    let version = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let fingerprint: [u8; 32] = prefix[12..44].try_into().expect("32 bytes");
    let header_len = u64::from_le_bytes(prefix[44..52].try_into().expect("8 bytes"));
    Ok((fingerprint, header_len))
}

/// Reads version, fingerprint and JSON header only.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut prefix = [0u8; PREFIX_LEN];
    f.read_exact(&mut prefix)
        .map_err(|_| integrity("file is shorter than the checkpoint prefix"))?;
    let (fingerprint, header_len) = parse_prefix(&prefix)?;
    let mut json = Vec::new();
    f.take(header_len).read_to_end(&mut json).map_err(|e| Error::io(path, e))?;
    if json.len() as u64 != header_len {
        return Err(integrity("header is truncated"));
    }
    let header = serde_json::from_slice(&json).map_err(|e| integrity(format!("header is not valid JSON: {e}")))?;
    Ok(CheckpointInfo {
        version: FORMAT_VERSION,
        fingerprint,
        header,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| integrity("tensor section is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| integrity("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| integrity("tensor too large"))?;
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| integrity("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| integrity(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (fingerprint, header_len) = parse_prefix(bytes)?;
    if bytes.len() < PREFIX_LEN + 32 {
        return Err(integrity("file is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity("checksum mismatch; file is truncated or corrupted"));
    }
    let mut c = Cursor { bytes: body, pos: PREFIX_LEN };
    let header_len = usize::try_from(header_len).map_err(|_| integrity("header too large"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(header_len)?).map_err(|e| integrity(format!("header is not valid JSON: {e}")))?;
    let cfg = &header.config;
    if architecture_fingerprint(&cfg.generator, &cfg.critic) != fingerprint {
        return Err(integrity("fingerprint does not match the stored architecture"));
    }
    let count = c.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = c.tensor()?;
        tensors.insert(name, t);
    }
    if c.pos != body.len() {
        return Err(integrity("trailing bytes after tensor section"));
    }

    let mut generator = Generator::new(cfg.generator.clone(), 0)?;
    let mut critic = Critic::new(cfg.critic.clone(), 0)?;
    let mut fill = |prefix: &str, params: &mut [Param], meta: AdamMeta| -> Result<Adam> {
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.remove(&name).ok_or_else(|| integrity(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(integrity(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = take(format!("{prefix}/{}", p.name), &shape)?;
            m.push(take(format!("{prefix}.adam_m/{}", p.name), &shape)?);
            v.push(take(format!("{prefix}.adam_v/{}", p.name), &shape)?);
        }
        Ok(Adam {
            config: meta.config,
            steps: meta.steps,
            m,
            v,
        })
    };
    let generator_adam = fill("generator", generator.params_mut(), header.generator_adam)?;
    let critic_adam = fill("critic", critic.params_mut(), header.critic_adam)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(integrity(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        config: header.config,
        generator,
        critic,
        generator_adam,
        critic_adam,
        generator_steps: header.generator_steps,
        critic_steps: header.critic_steps,
        stage_start: header.stage_start,
        generator_cursor: header.generator_cursor,
        critic_cursor: header.critic_cursor,
        alpha_rng: header.alpha_rng,
        fingerprint,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

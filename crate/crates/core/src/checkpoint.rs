//! Self-describing bundle files.
//!
//! Layout: the 8-byte magic `ICBNDL01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter tensor as little-endian `f32`
//! values in header order. The header's `hash` is the SHA-256 of the header
//! serialized with an empty hash, followed by the parameter bytes; it is
//! checked on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, LineageEntry, ModelBundle};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::textcond::Vocab;

pub const MAGIC: &[u8; 8] = b"ICBNDL01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: DenoiserConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub schedule: NoiseSchedule,
    pub lineage: Vec<LineageEntry>,
    pub params: Vec<ParamEntry>,
    pub hash: String,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn param_bytes(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.numel() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn header_for(b: &ModelBundle) -> Result<Header> {
    Ok(Header {
        version: FORMAT_VERSION,
        config: b.config.clone(),
        vocab: b.vocab.clone(),
        vocab_hash: sha_hex(&[serde_json::to_string(&b.vocab)?.as_bytes()]),
        schedule: b.schedule.clone(),
        lineage: b.lineage.clone(),
        params: b
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hash: String::new(),
    })
}

fn hash_of(header: &Header, body: &[u8]) -> Result<String> {
    let mut h = header.clone();
    h.hash.clear();
    Ok(sha_hex(&[serde_json::to_vec(&h)?.as_slice(), body]))
}

/// Content hash identifying a bundle (configs, lineage and parameters).
pub fn bundle_hash(b: &ModelBundle) -> Result<String> {
    hash_of(&header_for(b)?, &param_bytes(&b.params))
}

pub fn encode_bundle(b: &ModelBundle) -> Result<Vec<u8>> {
    let body = param_bytes(&b.params);
    let mut header = header_for(b)?;
    header.hash = hash_of(&header, &body)?;
    let hj = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + hj.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
    out.extend_from_slice(&hj);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses only the header; no hash verification.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a bundle file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok((header, end))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let (header, start) = decode_header(bytes)?;
    let body = &bytes[start..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if body.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "parameter block has {} bytes, header describes {}",
            body.len(),
            expected * 4
        )));
    }
    if hash_of(&header, body)? != header.hash {
        return Err(Error::Checkpoint("hash mismatch: file is corrupt or modified".into()));
    }
    header.schedule.validate()?;
    let mut params = ParamStore::new();
    let mut off = 0;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data = body[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        params.insert(&p.name, Tensor::from_vec(&p.shape, data)?)?;
    }
    ModelBundle::from_parts(header.config, header.vocab, header.schedule, params, header.lineage)
}

pub fn save_bundle(b: &ModelBundle, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_bundle(b)?;
    write_atomic(path.as_ref(), &bytes)?;
    let (h, _) = decode_header(&bytes)?;
    Ok(h.hash)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode_bundle(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

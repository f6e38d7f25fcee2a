//! Versioned container for named tensors with a JSON header.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "JCKP"        magic, 4 bytes
//! version       u16
//! header_len    u32
//! header        JSON: {"meta": ..., "tensors": [{"name", "shape"}], "checksum"}
//! data          every tensor in header order as f64
//! ```
//!
//! `checksum` is FNV-1a over the data section.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JCKP";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<Entry>,
    checksum: u64,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Writes `meta` and `tensors` to `path` atomically (temporary file then
/// rename).
pub fn write<M: Serialize>(path: &Path, meta: &M, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut data = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    for (_, t) in tensors {
        for v in t.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        meta,
        tensors: tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        checksum: fnv1a(&data),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&data)?;
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<(String, Tensor)>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let data = &bytes[10 + len..];
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if data.len() != expected {
        return Err(Error::Checkpoint(format!("data section has {} bytes, header declares {expected}", data.len())));
    }
    if fnv1a(data) != header.checksum {
        return Err(bad("checksum mismatch"));
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let vals: Vec<f64> =
            data[off..off + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        off += n * 8;
        tensors.push((e.name, Tensor::from_shape_vec(IxDyn(&e.shape), vals).expect("declared shape")));
    }
    Ok((header.meta, tensors))
}

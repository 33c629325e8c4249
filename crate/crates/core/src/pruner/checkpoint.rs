//! Binary container for posterior parameters.
//!
//! Layout (little endian): magic `MSPHI\0\0\0`, `u32` format version,
//! 32-byte graph hash, `u32` bits, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, a `u32` rank and `u64` extents; then
//! every tensor's `f32` values in table order; finally a SHA-256 of all
//! preceding bytes.

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::microgradnet::{ArchGraph, Tensor, WeightStore};

pub const MAGIC: &[u8; 8] = b"MSPHI\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a posterior checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("checkpoint was written for a different graph")]
    GraphMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph_hash: [u8; 32],
    pub weights: WeightStore<f32>,
}

pub fn encode(graph_hash: [u8; 32], ws: &WeightStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.extend_from_slice(&graph_hash);
    buf.write_u32::<LittleEndian>(ws.bits).unwrap();
    buf.write_u32::<LittleEndian>(ws.len() as u32).unwrap();
    for (name, t) in ws.iter() {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(t.shape().len() as u32)
            .unwrap();
        for &d in t.shape() {
            buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
    }
    for (_, t) in ws.iter() {
        for &v in t.data() {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = &body[MAGIC.len()..];
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut graph_hash = [0u8; 32];
    r.read_exact(&mut graph_hash)?;
    let bits = r.read_u32::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > r.len() {
            return Err(CheckpointError::Malformed("name runs past end".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_string();
        r = rest;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let mut weights = WeightStore::default();
    weights.bits = bits;
    for (name, shape) in table {
        let numel: usize = shape.iter().product();
        if numel * 4 > r.len() {
            return Err(CheckpointError::Malformed(format!(
                "{name}: data runs past end"
            )));
        }
        let data = (0..numel)
            .map(|_| r.read_f32::<LittleEndian>())
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        weights.insert(name, t);
    }
    if !r.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        graph_hash,
        weights,
    })
}

pub fn save(path: &Path, graph: &ArchGraph, ws: &WeightStore<f32>) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(graph.structure_hash(), ws))?;
    Ok(f.sync_all()?)
}

/// Reads a checkpoint; with `graph`, also requires it to match that graph.
pub fn load(path: &Path, graph: Option<&ArchGraph>) -> Result<Checkpoint, CheckpointError> {
    let ck = decode(&std::fs::read(path)?)?;
    if graph.is_some_and(|g| g.structure_hash() != ck.graph_hash) {
        return Err(CheckpointError::GraphMismatch);
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> WeightStore<f32> {
        let mut ws = WeightStore::default();
        ws.insert("a/weight", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        ws.insert("a/weight.log_sigma2", Tensor::full(&[2, 3], -6.0));
        ws.insert("b/group.mu", Tensor::full(&[4], 1.0));
        ws
    }

    #[test]
    fn round_trip_is_exact() {
        let ws = store();
        let ck = decode(&encode([7; 32], &ws)).unwrap();
        assert_eq!(ck.weights, ws);
        assert_eq!(ck.graph_hash, [7; 32]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode([0; 32], &store());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Checksum)));
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
        let mut v2 = encode([0; 32], &store());
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
    }
}

//! Checkpoint container: one line of JSON manifest, then a blob of
//! little-endian f64 values in manifest order.
//!
//! The manifest carries the block table (name, shape, byte offset), a SHA-256
//! of the blob, and an arbitrary JSON `state` object.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "epo-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f64 values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blocks: Vec<BlockEntry>,
    pub blob_bytes: usize,
    pub sha256: String,
    pub state: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blocks {
    order: Vec<String>,
    map: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Blocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!("checkpoint block {name}"), expected, values.len()));
        }
        if self.map.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate block {name}")));
        }
        self.order.push(name.clone());
        self.map.insert(name, (shape, values));
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))
    }

    /// Values of a block, checked against an expected length.
    pub fn values(&self, name: &str, len: usize) -> Result<&[f64]> {
        let (_, v) = self.get(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("block {name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }
}

pub fn write(path: &Path, state: &Value, blocks: &Blocks) -> Result<()> {
    let mut entries = Vec::with_capacity(blocks.order.len());
    let mut blob = Vec::new();
    for name in &blocks.order {
        let (shape, values) = &blocks.map[name];
        entries.push(BlockEntry { name: name.clone(), shape: shape.clone(), offset: blob.len(), len: values.len() });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        blocks: entries,
        blob_bytes: blob.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
        state: state.clone(),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.write_all(&blob)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable manifest: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    Ok((manifest, blob))
}

pub fn read(path: &Path) -> Result<(Value, Blocks)> {
    let (manifest, blob) = read_manifest(path)?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Checkpoint("blob checksum mismatch".into()));
    }
    let mut blocks = Blocks::new();
    let mut expected_offset = 0;
    for e in &manifest.blocks {
        if e.offset != expected_offset || e.offset + 8 * e.len > blob.len() {
            return Err(Error::Checkpoint(format!("block {} has an inconsistent offset", e.name)));
        }
        let values = blob[e.offset..e.offset + 8 * e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        blocks.insert(e.name.clone(), e.shape.clone(), values)?;
        expected_offset += 8 * e.len;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint("trailing bytes after the last block".into()));
    }
    Ok((manifest.state, blocks))
}

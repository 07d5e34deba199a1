//! Binary checkpoint container shared by all three stages.
//!
//! Layout: the magic `TIPSCKPT`, a little-endian `u32` format version, a
//! `u32` header length, a JSON header, the parameter blocks as little-endian
//! `f32` in header order, and a SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tips_tensor::nn::ParamStore;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TIPSCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub const STAGE_TEXT2POSE: &str = "text2pose";
pub const STAGE_REFINER: &str = "refiner";
pub const STAGE_RENDER: &str = "render";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: String,
    pub iteration: u64,
    pub seed: u64,
    pub config: serde_json::Value,
    pub blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn new(stage: &str, iteration: u64, seed: u64, config: serde_json::Value) -> Self {
        Checkpoint { stage: stage.to_string(), iteration, seed, config, blocks: Vec::new() }
    }

    /// Appends every block of `ps`, prefixing names with `prefix.`.
    pub fn push_store(&mut self, prefix: &str, ps: &ParamStore) {
        for (name, shape, data) in ps.blocks() {
            self.blocks.push(ParamBlock { name: format!("{prefix}.{name}"), shape: shape.to_vec(), data: data.to_vec() });
        }
    }

    /// Loads the blocks under `prefix.` into `ps`; every parameter must be present.
    pub fn load_store(&self, prefix: &str, ps: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}.");
        let blocks = self.blocks.iter().filter_map(|b| b.name.strip_prefix(&p).map(|n| (n, b.shape.as_slice(), b.data.as_slice())));
        let mut staged = ps.clone();
        staged.load_blocks(blocks).map_err(Error::CorruptCheckpoint)?;
        *ps = staged;
        Ok(())
    }

    pub fn expect_stage(&self, stage: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch { expected: stage.to_string(), found: self.stage.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(self).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(header.len() + 52 + self.blocks.iter().map(|b| b.data.len() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header = body.get(16..16 + hlen).ok_or_else(|| corrupt("header overruns file"))?;
        let mut ckpt: Checkpoint = serde_json::from_slice(header).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut rest = &body[16 + hlen..];
        for b in &mut ckpt.blocks {
            let n: usize = b.shape.iter().product();
            if rest.len() < n * 4 {
                return Err(corrupt(&format!("block `{}` is truncated", b.name)));
            }
            let (chunk, tail) = rest.split_at(n * 4);
            b.data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes after parameter blocks"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

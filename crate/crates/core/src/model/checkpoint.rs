//! Binary checkpoint container.
//!
//! Layout (little endian): magic `MVCK`, `u32` version, `u32` metadata length and
//! JSON metadata, `u64` length and the embedded graph file, `u32` block count, then
//! per block a `u16` name length, the UTF-8 name, `u8` rank, `u32` dims and the
//! `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters, TrainedModel};
use crate::corpus::{HashtagVocab, UserRecord};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const NODE_INPUTS: &str = "graph.node_inputs";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: HashtagVocab,
    users: Vec<UserRecord>,
    popular: Vec<usize>,
    seed: u64,
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config,
            vocab: self.vocab.clone(),
            users: self.users.clone(),
            popular: self.popular.clone(),
            seed: self.seed,
        })?;
        let graph = self.graph.to_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(graph.len() as u64).to_le_bytes());
        out.extend_from_slice(&graph);
        let blocks = self.params.blocks();
        out.extend_from_slice(&(blocks.len() as u32 + 1).to_le_bytes());
        for b in &blocks {
            put_block(&mut out, &b.name, &b.shape, b.values);
        }
        put_block(
            &mut out,
            NODE_INPUTS,
            self.node_inputs.shape(),
            self.node_inputs.as_slice().expect("standard layout"),
        );
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta_len = c.u32()? as usize;
        let meta: Meta = serde_json::from_slice(c.take(meta_len)?)
            .map_err(|e| Error::format("checkpoint", format!("metadata: {e}")))?;
        let graph_len = usize::try_from(c.u64()?)
            .map_err(|_| Error::format("checkpoint", "graph length overflow"))?;
        let graph = InteractionGraph::from_bytes(c.take(graph_len)?)?;
        let count = c.u32()? as usize;
        let mut stored: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "block name is not utf-8"))?
                .to_string();
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "block size overflow"))?;
            let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "block size overflow"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if stored.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate block {name}")));
            }
        }
        if c.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }

        let mut params = ModelParameters::init(0, &meta.config, meta.users.len(), meta.vocab.len())?;
        let expected: Vec<(String, Vec<usize>)> = params
            .blocks()
            .into_iter()
            .map(|b| (b.name, b.shape))
            .collect();
        for (dst, (name, shape)) in params.blocks_mut().into_iter().zip(expected) {
            let (s, values) = stored
                .remove(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing block {name}")))?;
            if s != shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("block {name} has shape {s:?}, expected {shape:?}"),
                ));
            }
            dst.values.copy_from_slice(&values);
        }
        let (shape, values) = stored
            .remove(NODE_INPUTS)
            .ok_or_else(|| Error::format("checkpoint", "missing node inputs"))?;
        let expected = vec![graph.node_count(), meta.config.node_dim()];
        if shape != expected {
            return Err(Error::format(
                "checkpoint",
                format!("node inputs have shape {shape:?}, expected {expected:?}"),
            ));
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::format("checkpoint", format!("unknown block {name}")));
        }
        if graph.user_count() != meta.users.len() {
            return Err(Error::format("checkpoint", "user list does not match graph"));
        }
        if meta.popular.iter().any(|&p| p >= meta.users.len()) {
            return Err(Error::format("checkpoint", "popular user index out of range"));
        }
        Ok(Self {
            config: meta.config,
            params,
            vocab: meta.vocab,
            users: meta.users,
            graph,
            node_inputs: Array2::from_shape_vec((expected[0], expected[1]), values).expect("checked shape"),
            popular: meta.popular,
            seed: meta.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

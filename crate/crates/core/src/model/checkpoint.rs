//! Checkpoint container.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {
//!   "format": "bofi-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "vocab": ["<pad>", "<bos>", "<eos>", "<unk>", "a", ...],
//!   "params": [ { "name": "enc.in.w", "rows": 32, "cols": 64, "data": "<base64>" }, ... ]
//! }
//! ```
//!
//! `data` is the row-major values as little-endian IEEE-754 `f64` bytes,
//! base64-encoded (standard alphabet, padded), so save/load is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::net::{Model, ModelConfig};
use super::tensor::Tensor;
use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const FORMAT: &str = "bofi-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<Block>,
}

fn encode(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(b: &Block) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&b.data)
        .map_err(|e| Error::Checkpoint(format!("block {}: {e}", b.name)))?;
    if bytes.len() != b.rows * b.cols * 8 {
        return Err(Error::Checkpoint(format!(
            "block {} holds {} bytes, expected {}",
            b.name,
            bytes.len(),
            b.rows * b.cols * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::from_vec(b.rows, b.cols, data))
}

pub fn to_json(model: &Model, vocab: &Vocab) -> Result<String> {
    if vocab.size() != model.vocab_size() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} words but the model expects {}",
            vocab.size(),
            model.vocab_size()
        )));
    }
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        vocab: vocab.clone(),
        params: model
            .params()
            .iter()
            .map(|(_, name, t)| Block {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: encode(t),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&c)?)
}

pub fn from_json(text: &str) -> Result<(Model, Vocab)> {
    let c: Container =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if c.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", c.format)));
    }
    if c.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
    }
    let mut model = Model::new(c.config, c.vocab.size(), 0)?;
    if c.params.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter blocks, model has {}",
            c.params.len(),
            model.params().len()
        )));
    }
    for block in &c.params {
        let id = model
            .params()
            .find(&block.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", block.name)))?;
        let t = decode(block)?;
        if t.shape() != model.params().get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                block.name,
                t.shape(),
                model.params().get(id).shape()
            )));
        }
        *model.params_mut().get_mut(id) = t;
    }
    Ok((model, c.vocab))
}

pub fn save(path: impl AsRef<Path>, model: &Model, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(model, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Vocab)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

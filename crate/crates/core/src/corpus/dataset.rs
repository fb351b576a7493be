use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::boxes::parse_bracketed;
use crate::error::{Error, Result};

/// Default caption truncation length.
pub const DEFAULT_MAX_LEN: usize = 16;

/// One caption with its parse, region features and references, as stored in
/// the dataset JSONL (one object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub tree: Option<String>,
    pub regions: Vec<Vec<f64>>,
    #[serde(default)]
    pub refs: Vec<Vec<String>>,
}

impl CaptionRecord {
    pub fn region_dim(&self) -> usize {
        self.regions.first().map_or(0, Vec::len)
    }

    fn invalid(&self, message: impl Into<String>) -> Error {
        Error::Record {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    /// Check the record invariants and apply truncation. A tree that fails to
    /// parse or does not match the tokens is dropped, as is the tree of any
    /// truncated caption.
    pub fn normalize(mut self, max_len: usize) -> Result<CaptionRecord> {
        if self.tokens.is_empty() {
            return Err(self.invalid("caption has no tokens"));
        }
        if self.regions.is_empty() {
            return Err(self.invalid("record has no regions"));
        }
        let dim = self.region_dim();
        if dim == 0 {
            return Err(self.invalid("region vectors are empty"));
        }
        if let Some((i, r)) = self.regions.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(self.invalid(format!(
                "region {i} has dimension {}, expected {dim}",
                r.len()
            )));
        }
        if self.regions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(self.invalid("region features must be finite"));
        }
        if self.tokens.len() > max_len {
            self.tokens.truncate(max_len);
            self.tree = None;
        }
        if let Some(tree) = &self.tree {
            match parse_bracketed(tree) {
                Ok(t) if t.leaves() == self.tokens => {}
                Ok(_) => {
                    warn!("record {}: tree leaves differ from tokens, dropping tree", self.id);
                    self.tree = None;
                }
                Err(e) => {
                    warn!("record {}: unparsable tree ({e}), dropping it", self.id);
                    self.tree = None;
                }
            }
        }
        for r in &mut self.refs {
            r.truncate(max_len);
        }
        Ok(self)
    }
}

/// Read and validate a JSONL dataset. All records must share one region
/// dimension.
pub fn read_dataset(path: impl AsRef<Path>, max_len: usize) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    // A dataset that cannot be read is a data problem, not a runtime one.
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text, max_len).map_err(|e| match e {
        Error::DataLine { line, message, .. } => Error::DataLine {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub fn parse_dataset(text: &str, max_len: usize) -> Result<Vec<CaptionRecord>> {
    let mut out: Vec<CaptionRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| Error::DataLine {
            path: Default::default(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let rec = rec.normalize(max_len)?;
        if let Some(first) = out.first() {
            if first.region_dim() != rec.region_dim() {
                return Err(rec.invalid(format!(
                    "region dimension {} differs from {} used by {}",
                    rec.region_dim(),
                    first.region_dim(),
                    first.id
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[CaptionRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(records)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

//! Layered configuration: built-in defaults, then a TOML file, then
//! `--set key=value` overrides.
//!
//! The file mirrors [`Config`]: one table per section, for example
//!
//! ```toml
//! [data]
//! path = "out/data.jsonl"
//! level_k = -1
//!
//! [model]
//! d = 64
//!
//! [train]
//! mode = "joint"
//! epochs = 5
//!
//! [train.rl]
//! enabled = true
//! M = 5
//! ```
//!
//! Override keys are dotted paths (`train.rl.M=3`, `decode.manner=sa`). The
//! value is read as a TOML literal when it parses as one and as a bare string
//! otherwise. Unknown sections and keys are errors.

use std::path::{Path, PathBuf};

use bofi::boxes::Level;
use bofi::corpus::{SynthConfig, DEFAULT_MAX_LEN};
use bofi::decode::Manner;
use bofi::eval::BenchConfig;
use bofi::model::ModelConfig;
use bofi::train::TrainConfig;
use bofi::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training dataset (JSONL).
    pub path: Option<PathBuf>,
    /// Evaluation dataset; the training set is used when absent.
    pub eval_path: Option<PathBuf>,
    pub max_len: usize,
    pub min_count: usize,
    /// Box split depth; -1 is the finest level.
    pub level_k: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            eval_path: None,
            max_len: DEFAULT_MAX_LEN,
            min_count: 5,
            level_k: -1,
        }
    }
}

impl DataConfig {
    pub fn level(&self) -> Result<Level> {
        Level::from_k(self.level_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub manner: Manner,
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            manner: Manner::Na,
            beam: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub bench: BenchConfig,
    /// Synthetic corpus generator used by `gen-data`.
    pub gen: SynthConfig,
}

impl Config {
    /// Defaults, overlaid with `file` when given, overlaid with `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.min_count == 0 {
            return Err(Error::Config("data.min_count must be at least 1".into()));
        }
        if self.data.max_len == 0 {
            return Err(Error::Config("data.max_len must be at least 1".into()));
        }
        if self.data.max_len > self.model.max_len {
            return Err(Error::Config(format!(
                "data.max_len ({}) exceeds model.max_len ({})",
                self.data.max_len, self.model.max_len
            )));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        self.data.level()?;
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted key in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_typed_when_possible() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("1e-3"), toml::Value::Float(1e-3));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("sa"), toml::Value::String("sa".into()));
        assert_eq!(parse_value("\"x y\""), toml::Value::String("x y".into()));
    }

    #[test]
    fn nested_override() {
        let cfg = Config::load(None, &["train.rl.M=3".into(), "decode.manner=sa".into()]).unwrap();
        assert_eq!(cfg.train.rl.m, 3);
        assert_eq!(cfg.decode.manner, Manner::Sa);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.bogus=1", "nosuch.x=1", "model.d=-4", "train"] {
            let err = Config::load(None, &[bad.into()]).unwrap_err();
            assert_eq!(err.kind(), bofi::ErrorKind::Config, "{bad}");
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert_eq!(Config::load(Some(&p), &[]).unwrap(), cfg);
    }
}

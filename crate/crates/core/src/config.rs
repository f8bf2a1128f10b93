//! Layered run configuration: a TOML document with `model`, `train`, `data`
//! and `eval` sections plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::formats::PrepareOptions;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of feature archives.
    pub features: PathBuf,
    /// Subjects held out for model selection.
    pub validation_subjects: usize,
    /// Subjects held out for the final test report.
    pub test_subjects: usize,
    pub prepare: PrepareOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { features: PathBuf::from("features"), validation_subjects: 1, test_subjects: 0, prepare: PrepareOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Window stride at test time; 0 means the sequence length.
    pub stride: usize,
    pub batch_size: usize,
    pub protocol: Protocol,
    pub repetitions: usize,
    pub validation_subjects: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 0, batch_size: 8, protocol: Protocol::Loso, repetitions: 1, validation_subjects: 1 }
    }
}

impl EvalConfig {
    pub fn effective_stride(&self, seq_len: usize) -> usize {
        if self.stride == 0 {
            seq_len
        } else {
            self.stride
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a document, applies overrides, and validates. Unknown keys in
    /// either place are rejected.
    pub fn resolve(document: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = document.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.batch_size == 0 || self.eval.repetitions == 0 {
            return Err(Error::Config("eval.batch_size and eval.repetitions must be at least 1".into()));
        }
        Ok(())
    }

    /// Every effective value, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when possible
/// and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

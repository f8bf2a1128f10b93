use std::path::Path;

use anyhow::{Context, Result};
use lseq_core::config::apply_override;
use lseq_core::formats::Manifest;
use lseq_core::SynthConfig;

use crate::runs::{create_dir, write_text};

/// A preset, optionally replaced by a TOML document, with `key=value`
/// overrides applied on top. Unknown keys are rejected.
pub fn resolve_synth_config(preset: &str, seed: u64, document: Option<&Path>, overrides: &[String]) -> Result<SynthConfig> {
    let base = match document {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: toml::Table = toml::from_str(&toml::to_string(&SynthConfig::preset(preset, seed)?)?)?;
            let doc: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            table.extend(doc);
            table
        }
        None => toml::from_str(&toml::to_string(&SynthConfig::preset(preset, seed)?)?)?,
    };
    let mut table = base;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: SynthConfig = toml::Value::Table(table).try_into().context("synthetic data configuration")?;
    config.validate()?;
    Ok(config)
}

/// Writes the dataset, its manifest and a `synth.toml` snapshot.
pub fn synthesize(config: &SynthConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    config.validate()?;
    create_dir(out_dir)?;
    let manifest = lseq_core::synth::write_dataset(config, out_dir, workers)?;
    write_text(&out_dir.join("synth.toml"), &toml::to_string(config)?)?;
    Ok(manifest)
}

//! Layered run configuration: built-in defaults, then the `--config` TOML
//! file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hmmseq_core::sampler::SamplerConfig;
use hmmseq_core::simulate::SimSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Table;

/// Contents of a `--config` file. Sections are kept as raw tables so they
/// can be layered over a preset before being typed.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub sampler: Table,
    #[serde(default)]
    pub simulate: Table,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub model: Option<String>,
    pub q0: Option<f64>,
    pub paired: Option<bool>,
    pub filter_threshold: Option<u64>,
    pub threads: Option<usize>,
    pub min_gaps: Option<usize>,
    pub preset: Option<String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("config: cannot read {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("config: {}", path.display()))
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: &Table, what: &str) -> Result<T> {
    let mut table = Table::try_from(base).with_context(|| format!("config: {what}"))?;
    merge(&mut table, over);
    table.try_into().with_context(|| format!("config: [{what}] section"))
}

pub fn sampler_config(file: &ConfigFile) -> Result<SamplerConfig<f64>> {
    layered(&SamplerConfig::default(), &file.sampler, "sampler")
}

pub fn sim_spec(file: &ConfigFile, preset: Option<&str>) -> Result<SimSpec> {
    let base = match preset.or(file.run.preset.as_deref()).unwrap_or("full") {
        "full" => SimSpec::full(),
        "desk" => SimSpec::desk(),
        other => bail!("config: unknown preset {other:?} (expected desk or full)"),
    };
    layered(&base, &file.simulate, "simulate")
}

/// Effective settings that determine a command's numeric output. Its
/// serialized form is hashed into every artifact header.
#[derive(Debug, Serialize)]
pub struct Effective<'a> {
    pub command: &'a str,
    pub tool_version: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_threshold: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_gaps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<&'a SamplerConfig<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<&'a SimSpec>,
}

impl Effective<'_> {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("effective config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

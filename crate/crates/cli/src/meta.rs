//! Artifact headers and output helpers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::Effective;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Comment lines placed at the top of every text artifact.
pub fn header_lines(eff: &Effective<'_>, seed: Option<u64>) -> Vec<String> {
    let mut v = vec![format!("hmmseq {VERSION}"), format!("command={}", eff.command)];
    if let Some(s) = seed {
        v.push(format!("seed={s}"));
    }
    v.push(format!("config_hash={}", eff.hash()));
    v
}

/// The same header as a TOML table, for key-value artifacts.
pub fn header_table(eff: &Effective<'_>, seed: Option<u64>) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("tool".into(), format!("hmmseq {VERSION}").into());
    t.insert("command".into(), eff.command.into());
    if let Some(s) = seed {
        t.insert("seed".into(), i64::try_from(s).map_or_else(|_| s.to_string().into(), toml::Value::from));
    }
    t.insert("config_hash".into(), eff.hash().into());
    t
}

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("io: cannot create output directory {}", path.display()))?;
        Ok(OutDir(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("io: cannot write {}", p.display()))?;
        Ok(p)
    }

    /// Writes through a buffered writer built by `f`.
    pub fn write_with(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("io: cannot format {name}"))?;
        self.write(name, buf)
    }
}

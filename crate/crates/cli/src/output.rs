//! Run-directory writing. Every file goes through a temporary sibling and a
//! rename, so readers never see half-written artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub struct OutDir {
    path: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(OutDir { path: path.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.path)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        let dest = self.path.join(name);
        tmp.persist(&dest).with_context(|| format!("writing {}", dest.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Renders with a core writer (CSV tables) into memory first.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> lda_core::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write(name, &buf)
    }

    /// Writes `manifest.json` listing every artifact written before it.
    pub fn finish<C: Serialize>(mut self, command: &str, config: &C, inputs: BTreeMap<&str, String>) -> Result<()> {
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json("manifest.json", &manifest)
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C> {
    command: &'a str,
    version: &'a str,
    /// Effective configuration with defaults resolved.
    config: &'a C,
    inputs: BTreeMap<&'a str, String>,
    outputs: Vec<String>,
}

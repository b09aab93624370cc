//! Run manifests: one `manifest.json` per output directory naming the config,
//! build and every file the run wrote next to it.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    /// SHA-256 of the resolved `key = value` listing.
    pub config_hash: String,
    pub config: Vec<(String, String)>,
    pub build: String,
    pub master_seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// File names relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    };
    match option_env!("ESAMP_BUILD_ID") {
        Some(id) => format!(
            "{} {} {profile} {id}",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        ),
        None => format!(
            "{} {} {profile}",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        ),
    }
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Collects the files of one run directory and seals them into a manifest.
pub struct RunDir {
    dir: PathBuf,
    command: String,
    config: Vec<(String, String)>,
    config_hash: String,
    master_seed: u64,
    started: u128,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(
        dir: &Path,
        command: &str,
        config: Vec<(String, String)>,
        config_hash: String,
        master_seed: u64,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            config,
            config_hash,
            master_seed,
            started: now_ms(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    pub fn finish(self, summary: serde_json::Value) -> Result<RunManifest> {
        let m = RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: self.command,
            config_hash: self.config_hash,
            config: self.config,
            build: build_id(),
            master_seed: self.master_seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            outputs: self.outputs,
            summary,
        };
        let p = self.dir.join(MANIFEST_FILE);
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
        Ok(m)
    }
}

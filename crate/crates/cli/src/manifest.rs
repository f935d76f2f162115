//! Run manifests: what was run, with which resolved settings, and the
//! SHA-256 of everything it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub checksums: BTreeMap<String, String>,
    pub status: Status,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Manifest writer: [`Self::start`] records the run before any work,
/// [`Self::finish`] adds checksums of the produced files.
pub struct ManifestWriter {
    path: PathBuf,
    manifest: RunManifest,
}

impl ManifestWriter {
    pub fn start(
        path: PathBuf,
        command: &str,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: &[&Path],
    ) -> Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().skip(1).collect(),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            checksums: BTreeMap::new(),
            status: Status::Running,
        };
        let w = Self { path, manifest };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(mut self, outputs: &[PathBuf]) -> Result<RunManifest> {
        for p in outputs {
            let key = p.display().to_string();
            self.manifest.checksums.insert(key.clone(), sha256_file(p)?);
            self.manifest.outputs.push(key);
        }
        self.manifest.status = Status::Ok;
        self.write()?;
        Ok(self.manifest)
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

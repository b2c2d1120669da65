use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const VERSION: &str = env!("SSP_VERSION");

/// Record of one command invocation, one per output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub version: String,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Option<&Path>, seed: Option<u64>) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config: config.map(Path::to_path_buf),
                seed,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                version: VERSION.to_string(),
                duration_secs: 0.0,
            },
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str) -> &mut Self {
        self.manifest.outputs.push(name.to_string());
        self
    }

    /// Writes `manifest.json` into `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        for name in &self.manifest.outputs {
            anyhow::ensure!(dir.join(name).is_file(), "expected output {name} was not written");
        }
        let tmp = dir.join("manifest.json.tmp");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&tmp, json + "\n").with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, dir.join("manifest.json")).context("finalizing manifest")?;
        Ok(())
    }
}

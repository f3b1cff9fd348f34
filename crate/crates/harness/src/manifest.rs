use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, HarnessResult};

pub const MANIFEST_NAME: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub outputs: Vec<OutputDigest>,
}

pub fn sha256_file(path: &Path) -> HarnessResult<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Tracks files written by one command invocation.
pub struct RunRecorder {
    dir: PathBuf,
    command: String,
    seed: u64,
    config: serde_json::Value,
    started_unix: u64,
    clock: Instant,
    outputs: Vec<String>,
}

impl RunRecorder {
    pub fn new(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> HarnessResult<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            seed,
            config,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` to `name` inside the run directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> HarnessResult<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.track(name);
        Ok(path)
    }

    /// Records a file that was written by other means.
    pub fn track(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn finish(self) -> HarnessResult<RunManifest> {
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                Ok(OutputDigest {
                    path: name.clone(),
                    sha256: sha256_file(&self.dir.join(name))?,
                })
            })
            .collect::<HarnessResult<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            started_unix: self.started_unix,
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Other(e.into()))?;
        std::fs::write(self.dir.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> HarnessResult<RunManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Other(anyhow::anyhow!("{}: {e}", path.display())))
}

/// Outputs whose current digest differs from the manifest (or are missing).
pub fn verify_manifest(dir: &Path, manifest: &RunManifest) -> Vec<String> {
    manifest
        .outputs
        .iter()
        .filter(|o| sha256_file(&dir.join(&o.path)).map_or(true, |d| d != o.sha256))
        .map(|o| o.path.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_every_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = RunRecorder::new(dir.path(), "train", 5, serde_json::json!({"seed": 5})).unwrap();
        rec.write("a.csv", b"x,y\n1,2\n").unwrap();
        rec.write("sub/b.txt", b"hello").unwrap();
        let m = rec.finish().unwrap();
        assert_eq!(m.outputs.len(), 2);
        assert_eq!(
            m.outputs[1].sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        let back = read_manifest(dir.path()).unwrap();
        assert!(verify_manifest(dir.path(), &back).is_empty());
        std::fs::write(dir.path().join("a.csv"), b"tampered").unwrap();
        assert_eq!(verify_manifest(dir.path(), &back), vec!["a.csv".to_string()]);
    }
}

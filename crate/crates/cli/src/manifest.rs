//! Run manifests: hashed inputs, the echoed config, and hashed artifacts.
//! A rerun with an identical manifest must reproduce byte-identical outputs,
//! so the manifest carries no timestamps or machine state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    /// Echo of the resolved config file entries, in key order.
    pub config: BTreeMap<String, String>,
    /// Derived settings that affect the outputs (e.g. a data-driven idle
    /// threshold), recorded for exact reruns.
    pub effective: BTreeMap<String, String>,
    /// Input path -> sha256 of the file contents.
    pub inputs: BTreeMap<String, FileStamp>,
    /// Artifact path (relative to the out dir) -> sha256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, echo: &[(String, String)]) -> Manifest {
        Manifest {
            tool: "coasting",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            seed,
            config: echo.iter().cloned().collect(),
            effective: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(
            label.to_string(),
            FileStamp {
                path: path.display().to_string(),
                sha256: hash_file(path)?,
            },
        );
        Ok(())
    }

    pub fn record_artifact(&mut self, rel: &str, bytes: &[u8]) {
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Tracks files written by one subcommand so a failure can remove partial
/// outputs instead of leaving them behind.
pub struct ArtifactWriter {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<ArtifactWriter> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("creating {}", root.display()))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes one artifact and records it in the manifest.
    pub fn write(&mut self, manifest: &mut Manifest, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        manifest.record_artifact(rel, bytes);
        Ok(())
    }

    /// Removes everything written so far (failure path).
    pub fn remove_partial_outputs(&mut self) {
        for path in self.written.drain(..) {
            let _ = std::fs::remove_file(path);
        }
    }

    pub fn finish(mut self, manifest: &Manifest) -> Result<()> {
        let json = manifest.to_json();
        let path = self.root.join("manifest.json");
        std::fs::write(&path, json.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        self.written.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_json_is_deterministic() {
        let echo = vec![("b".to_string(), "2".to_string()), ("a".to_string(), "1".to_string())];
        let mut m1 = Manifest::new("sessions", 7, &echo);
        let mut m2 = Manifest::new("sessions", 7, &echo);
        m1.record_artifact("x.csv", b"hello");
        m2.record_artifact("x.csv", b"hello");
        assert_eq!(m1.to_json(), m2.to_json());
        assert!(m1.to_json().contains("\"a\": \"1\""));
    }

    #[test]
    fn failed_runs_remove_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new("t", 0, &[]);
        let mut writer = ArtifactWriter::new(dir.path()).unwrap();
        writer.write(&mut manifest, "a.txt", b"partial").unwrap();
        assert!(dir.path().join("a.txt").exists());
        writer.remove_partial_outputs();
        assert!(!dir.path().join("a.txt").exists());
    }
}

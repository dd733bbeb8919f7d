use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    /// SHA-256 of `"blob <len>\0" + content`, as git's SHA-256 object format.
    pub hash: String,
    pub bytes: u64,
}

pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<Artifact> {
    let content = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Artifact {
        path: path.to_path_buf(),
        hash: git_blob_hash(&content),
        bytes: content.len() as u64,
    })
}

/// Record of one run, written as `manifest.json` in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub success: bool,
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Utc::now(),
            finished: None,
            success: false,
        })
    }

    pub fn add_inputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.inputs.push(hash_file(p)?);
        }
        Ok(())
    }

    /// Hashes every file in `dir` except the manifest itself and writes the
    /// manifest.
    pub fn finish(mut self, dir: &Path, success: bool) -> Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
            .collect();
        files.sort();
        self.outputs = files.iter().map(|p| hash_file(p)).collect::<Result<_>>()?;
        self.finished = Some(Utc::now());
        self.success = success;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_hash() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(git_blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }
}

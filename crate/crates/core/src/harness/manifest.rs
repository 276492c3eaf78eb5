use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// SHA-256 of the checkpoint file used, if any.
    pub checkpoint_sha256: Option<String>,
    /// Effective settings after merging the config file and flags.
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub started_unix_s: u64,
}

impl RunManifest {
    pub fn new(command: &str, version: &str, config: serde_json::Value) -> Self {
        let started_unix_s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_owned(),
            version: version.to_owned(),
            seed: None,
            checkpoint_sha256: None,
            config,
            outputs: Vec::new(),
            started_unix_s,
        }
    }

    pub fn with_checkpoint(mut self, path: &Path) -> Result<Self, HarnessError> {
        let bytes = fs::read(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.checkpoint_sha256 = Some(sha256_hex(&bytes));
        Ok(self)
    }

    /// Write `<stem>.manifest.json` beside `output`, or `manifest.json` when
    /// `output` is a directory.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf, HarnessError> {
        let path = if output.is_dir() {
            output.join("manifest.json")
        } else {
            let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            output.with_file_name(format!("{stem}.manifest.json"))
        };
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lands_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.json");
        let ckpt = dir.path().join("m.ckpt");
        fs::write(&ckpt, b"abc").unwrap();
        let m = RunManifest::new("decode", "0.1.0", serde_json::json!({"beams": 10}))
            .with_checkpoint(&ckpt)
            .unwrap();
        let path = m.write_beside(&out).unwrap();
        assert_eq!(path, dir.path().join("report.manifest.json"));
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(
            back.checkpoint_sha256.as_deref(),
            Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
        assert_eq!(m.write_beside(dir.path()).unwrap(), dir.path().join("manifest.json"));
    }
}

//! Run manifests: everything needed to reproduce an output bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthesis::SynthesisConfig;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    /// Fails if the file's current content differs from the recorded digest.
    pub fn verify(&self) -> Result<()> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(Error::config(format!(
                "{} changed since the manifest was written (sha256 {now}, recorded {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(())
    }
}

/// Feature extractor used for a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Weights { file: FileDigest },
    RandomBank { seed: u64, topology: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully materialized configuration, defaults included.
    pub config: SynthesisConfig,
    pub backend: Backend,
    /// Input files by role (`source`, `content`, `style`, `style_mask`, `out_mask`).
    pub inputs: BTreeMap<String, FileDigest>,
    pub output: Option<FileDigest>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks every recorded input (and weight file) against its digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for d in self.inputs.values() {
            d.verify()?;
        }
        if let Backend::Weights { file } = &self.backend {
            file.verify()?;
        }
        Ok(())
    }
}

/// `out.png` → `out.manifest.json`.
pub fn manifest_path_for(output: impl AsRef<Path>) -> PathBuf {
    output.as_ref().with_extension("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        std::fs::write(&input, b"abc").unwrap();
        let m = RunManifest {
            command: "texture".into(),
            tool_version: "0.0.0".into(),
            seed: 7,
            config: SynthesisConfig::default(),
            backend: Backend::RandomBank {
                seed: 1,
                topology: vec![3, 8],
            },
            inputs: [("source".to_string(), FileDigest::of(&input).unwrap())].into(),
            output: None,
        };
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
        m.verify_inputs().unwrap();
        std::fs::write(&input, b"abd").unwrap();
        assert!(matches!(m.verify_inputs(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_path() {
        assert_eq!(manifest_path_for("x/o.png"), PathBuf::from("x/o.manifest.json"));
    }
}

//! Run manifests: what went in, what came out, and the digests to audit both.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{read_file, write_json, Failure};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// Resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(role: &str, path: &Path) -> Result<FileDigest, Failure> {
    let bytes = read_file(path)?;
    Ok(FileDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len(),
    })
}

impl RunManifest {
    pub fn new(command: &'static str, config: impl Serialize, seed: u64) -> Result<Self, Failure> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: serde_json::to_value(config).map_err(|e| Failure::new(2, format!("config snapshot: {e}")))?,
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        self.inputs.push(digest_file(role, path)?);
        Ok(())
    }

    pub fn artifact(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        self.artifacts.push(digest_file(role, path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        write_json(path, self)
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_secs: f64,
    pub metrics: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

impl RunManifest {
    pub fn artifact(dir: &Path, name: &str) -> CliResult<Artifact> {
        let (sha256, bytes) = file_sha256(&dir.join(name))?;
        Ok(Artifact {
            path: name.to_string(),
            sha256,
            bytes,
        })
    }

    pub fn path_in(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}{MANIFEST_SUFFIX}"))
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = Self::path_in(dir, &self.command);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Outcome of checking one artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check {
    Ok,
    Missing,
    Mismatch,
}

/// Checks all manifests in `dir`, sorted by file name.
pub fn verify_dir(dir: &Path) -> CliResult<Vec<(String, String, Check)>> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(MANIFEST_SUFFIX))
        })
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(CliError::Io(format!("no manifests in {}", dir.display())));
    }
    let mut out = Vec::new();
    for m in manifests {
        let man = RunManifest::read(&m)?;
        for a in &man.artifacts {
            let p = dir.join(&a.path);
            let check = if !p.exists() {
                Check::Missing
            } else if file_sha256(&p)? == (a.sha256.clone(), a.bytes) {
                Check::Ok
            } else {
                Check::Mismatch
            };
            out.push((man.command.clone(), a.path.clone(), check));
        }
    }
    Ok(out)
}

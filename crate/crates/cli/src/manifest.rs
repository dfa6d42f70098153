//! Per-stage manifests: config, digests, file hashes and upstream links.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ncmfair::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    /// Digest of the full merged config.
    pub config_digest: String,
    /// Digest of the config subset this stage depends on.
    pub scope_digest: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Upstream manifest (relative to the output root) → its SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Artifact (relative to this manifest's directory) → its SHA-256.
    pub files: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        Ok(serde_json::from_str(&text).map_err(ncmfair::Error::from)?)
    }

    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(|e| ncmfair::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    Ok(fs::read(path).map_err(|e| ncmfair::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ncmfair::Error::from)? + "\n";
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex(&Sha256::digest(read_bytes(path)?)))
}

/// Hashes `names` (relative to `dir`).
pub fn hash_files(dir: &Path, names: &[String]) -> CliResult<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.clone(), sha256_file(&dir.join(n))?))).collect()
}

/// Every manifest below `root`, sorted by path.
pub fn find_manifests(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| ncmfair::Error::Io { path: dir.clone(), source: e })?;
        for entry in entries {
            let path = entry.map_err(|e| ncmfair::Error::Io { path: dir.clone(), source: e })?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Fails unless the upstream manifest at `root/rel` exists and was produced
/// for `scope_digest`. Returns its hash for the `inputs` map.
pub fn require_upstream(root: &Path, rel: &str, scope_digest: &str, producer: &str) -> CliResult<(String, String)> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(ncmfair::Error::Io {
            path: path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("not found; run `{producer}` first")),
        }
        .into());
    }
    let m = Manifest::load(&path)?;
    if m.scope_digest != scope_digest {
        return Err(CliError::Verify(format!(
            "{} was produced with a different configuration; rerun `{producer}`",
            path.display()
        )));
    }
    Ok((rel.to_string(), sha256_file(&path)?))
}

//! Output directory handling and the hashed manifest of produced files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/` separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

/// Collects every file a command writes under one directory.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    /// Creates `dir`, refusing a non-empty one unless `force` is set.
    pub fn prepare(dir: &Path, force: bool) -> Result<Self> {
        if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        std::fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.record(rel);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(stda_core::Error::from)? + "\n";
        self.write(rel, text)
    }

    /// Registers a file written by other code.
    pub fn record(&mut self, rel: &str) {
        let p = PathBuf::from(rel);
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    /// Hashes every recorded file into `manifest.json` and returns its path.
    pub fn finish(mut self, command: &str) -> Result<PathBuf> {
        self.files.sort();
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = std::fs::read(self.dir.join(rel))?;
            files.push(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            files,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(stda_core::Error::from)? + "\n";
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text).map_err(stda_core::Error::from)?)
}

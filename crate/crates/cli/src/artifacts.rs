//! Atomic artifact output and the provenance manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    artifacts: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects named outputs in memory and publishes them together.
///
/// Every file is first written to a temporary sibling; renames happen only
/// once all temporaries exist, so a failure leaves no partial artifact set.
#[derive(Default)]
pub struct ArtifactSet {
    files: Vec<(String, Vec<u8>)>,
}

impl ArtifactSet {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Adds `manifest.json` describing every file added so far.
    pub fn add_manifest<C: Serialize>(&mut self, command: &str, config: &C) {
        let manifest = Manifest {
            tool: "vprune",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            artifacts: self
                .files
                .iter()
                .map(|(name, bytes)| ManifestEntry {
                    path: name.clone(),
                    bytes: bytes.len(),
                    sha256: sha256_hex(bytes),
                })
                .collect(),
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        self.add(MANIFEST_FILE, json.into_bytes());
    }

    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(dir)
                .with_context(|| format!("staging {name} in {}", dir.display()))?;
            tmp.write_all(bytes)
                .and_then(|_| tmp.flush())
                .with_context(|| format!("writing {name}"))?;
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, dest) in staged {
            tmp.persist(&dest)
                .with_context(|| format!("publishing {}", dest.display()))?;
            written.push(dest);
        }
        Ok(written)
    }
}

/// Writes one file atomically via a temporary sibling.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?
        .to_string_lossy()
        .into_owned();
    let mut set = ArtifactSet::default();
    set.add(&name, bytes.to_vec());
    set.commit(dir)?;
    Ok(())
}

//! Output-directory layout, content-addressed stage caches and the manifest.
//!
//! ```text
//! <output>/phantom/               activity, priors, sinograms (one experiment)
//! <output>/cache/<stage>-<key>/   kernel, dictionary and graph artifacts
//! <output>/recon/<algorithm>/     recorded image traces and final images
//! <output>/report/                CSV tables, renders
//! <output>/manifest.json          sha256 of every file above
//! ```
//!
//! A stage directory is complete once its `meta.json` exists; it is written
//! last. Stage keys hash the configuration that determines the stage's
//! output together with the keys of its inputs, so changing `J_a` rebuilds
//! the reconstruction kernel and the dictionaries mapped through it but not
//! the learning kernel or the graph.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io;

/// Bumped whenever an on-disk format or a stage's computation changes.
const FORMAT_VERSION: u32 = 1;

pub fn stage_key<T: Serialize + ?Sized>(stage: &str, parts: &T) -> String {
    let json = serde_json::to_vec(&(stage, FORMAT_VERSION, parts)).expect("config types serialize");
    format!("{:x}", Sha256::digest(json))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Hit,
    Built,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.root.join("phantom")
    }

    pub fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join("cache").join(format!("{stage}-{}", &key[..16]))
    }

    pub fn recon_dir(&self, algorithm: &str) -> PathBuf {
        self.root.join("recon").join(algorithm)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Reads `dir/meta.json` if it exists and carries `key`.
    pub fn load_meta<M: DeserializeOwned + HasKey>(&self, dir: &Path, key: &str) -> Result<Option<M>> {
        let path = dir.join("meta.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let meta: M = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
        Ok((meta.key() == key).then_some(meta))
    }

    pub fn store_meta<M: Serialize>(&self, dir: &Path, meta: &M) -> Result<()> {
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        io::write_text(&dir.join("meta.json"), &(text + "\n"))
    }

    /// Rewrites `manifest.json` with the hash of every file under the root.
    pub fn write_manifest(&self, config_hash: &str) -> Result<()> {
        let mut files = BTreeMap::new();
        for entry in walkdir::WalkDir::new(&self.root).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| self.root.clone());
                CliError::io(path, e.into())
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            if rel == Path::new("manifest.json") {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(|e| CliError::io(entry.path(), e))?;
            let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.insert(name, format!("{:x}", Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: config_hash.to_string(),
            files,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        io::write_text(&self.root.join("manifest.json"), &(text + "\n"))
    }
}

pub trait HasKey {
    fn key(&self) -> &str;
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Hash of the configuration of the last command.
    pub config: String,
    pub files: BTreeMap<String, String>,
}

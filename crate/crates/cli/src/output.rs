// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact writer that records every file it produces in `manifest.json`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tsmi::checkpoint::sha256_hex;
use tsmi::report::{Provenance, TOOL_VERSION};

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    command: &'a str,
    provenance: &'a Provenance,
    files: Vec<FileEntry>,
}

pub struct Output {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` to `rel` under the output directory.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel, bytes.as_ref());
        Ok(path)
    }

    /// Records a file written elsewhere (e.g. a checkpoint at a custom path).
    pub fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    /// Writes `manifest.json` listing every recorded file.
    pub fn finish(mut self, command: &str, prov: &Provenance) -> Result<usize> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let n = self.files.len();
        let manifest = Manifest {
            tool: TOOL_VERSION,
            command,
            provenance: prov,
            files: std::mem::take(&mut self.files),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(self.dir.join("manifest.json"), json)?;
        Ok(n)
    }
}

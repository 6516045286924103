//! Run manifests: a config snapshot plus content hashes of every input and
//! output file. No timestamps, so reruns produce identical manifests.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Output paths are recorded relative to `out_dir` so that the same run in
/// two directories yields the same manifest.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &PipelineConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> anyhow::Result<PathBuf> {
    let hash_all = |files: &[PathBuf], base: Option<&Path>| -> anyhow::Result<Vec<FileHash>> {
        let mut v = Vec::new();
        for f in files {
            let shown = base.and_then(|b| f.strip_prefix(b).ok()).unwrap_or(f);
            v.push(FileHash {
                path: shown.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(f)?,
            });
        }
        Ok(v)
    };
    let manifest = Manifest {
        tool: "vesselseg",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config: config.clone(),
        inputs: hash_all(inputs, None)?,
        outputs: hash_all(outputs, Some(out_dir))?,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

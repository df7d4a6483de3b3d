//! Run manifest: config snapshot, artifact checksums, timestamps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub name: String,
    pub recipe: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Walks the run directory and checksums every regular file except the
/// manifest itself.
pub fn collect_artifacts(run_dir: &Path) -> Result<Vec<ArtifactEntry>, CliError> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().map(|n| n != "manifest.json").unwrap_or(true) {
                files.push(path);
            }
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(run_dir)
                .expect("artifact under run dir")
                .to_string_lossy()
                .into_owned();
            let bytes = std::fs::metadata(&p)?.len();
            Ok(ArtifactEntry { path: rel, sha256: sha256_file(&p)?, bytes })
        })
        .collect()
}

pub fn write_manifest(
    run_dir: &Path,
    config: &crate::config::ExperimentConfig,
    started_at: String,
) -> Result<RunManifest, CliError> {
    let manifest = RunManifest {
        tool: "indlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: config.name.clone(),
        recipe: config.recipe.to_string(),
        seed: config.seed,
        config: serde_json::to_value(config).expect("config serializes"),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        artifacts: collect_artifacts(run_dir)?,
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

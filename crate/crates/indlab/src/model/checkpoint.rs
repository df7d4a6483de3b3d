//! Bit-exact checkpoint format: `manifest.json` describing the tensor table
//! plus `weights.bin` holding concatenated little-endian IEEE-754 f32 values
//! at the stated byte offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelParameters, ParamLayout};

pub const MAGIC: &str = "indlab";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad magic: expected {MAGIC:?}, found {0:?}")]
    BadMagic(String),
    #[error("unsupported version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("unsupported dtype {0:?} for tensor {1}")]
    BadDtype(String, String),
    #[error("tensor table mismatch at {name}: expected shape {expect:?} at offset {offset}, manifest has {found:?}")]
    ShapeMismatch { name: String, expect: Vec<usize>, offset: usize, found: Vec<usize> },
    #[error("weights blob has {found} bytes, manifest needs {expect}")]
    Truncated { expect: usize, found: usize },
    #[error("config mismatch on field `{field}`: checkpoint has {ckpt}, requested {want}")]
    ConfigMismatch { field: String, ckpt: String, want: String },
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into weights.bin.
    offset: usize,
    /// Byte length.
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
}

/// Writes `manifest.json` + `weights.bin` into `dir` (created if missing).
pub fn save(params: &ModelParameters<f32>, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let tensors: Vec<ManifestTensor> = params
        .layout
        .specs
        .iter()
        .map(|s| ManifestTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            dtype: "f32".into(),
            offset: s.offset * 4,
            length: s.len * 4,
        })
        .collect();
    let manifest = Manifest {
        magic: MAGIC.into(),
        version: VERSION,
        config: params.config.clone(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let mut blob = Vec::with_capacity(params.data.len() * 4);
    for &v in &params.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint, reproducing the saved parameters bit-exactly.
pub fn load(dir: &Path) -> Result<ModelParameters<f32>, CheckpointError> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.magic != MAGIC {
        return Err(CheckpointError::BadMagic(manifest.magic));
    }
    if manifest.version != VERSION {
        return Err(CheckpointError::BadVersion(manifest.version));
    }
    manifest.config.validate()?;
    let layout = ParamLayout::new(&manifest.config);
    if manifest.tensors.len() != layout.specs.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: "<tensor count>".into(),
            expect: vec![layout.specs.len()],
            offset: 0,
            found: vec![manifest.tensors.len()],
        });
    }
    for (spec, t) in layout.specs.iter().zip(&manifest.tensors) {
        if t.dtype != "f32" {
            return Err(CheckpointError::BadDtype(t.dtype.clone(), t.name.clone()));
        }
        if t.name != spec.name || t.shape != spec.shape || t.offset != spec.offset * 4 || t.length != spec.len * 4
        {
            return Err(CheckpointError::ShapeMismatch {
                name: spec.name.clone(),
                expect: spec.shape.clone(),
                offset: spec.offset * 4,
                found: t.shape.clone(),
            });
        }
    }
    let blob = std::fs::read(dir.join("weights.bin"))?;
    let expect = layout.total * 4;
    if blob.len() != expect {
        return Err(CheckpointError::Truncated { expect, found: blob.len() });
    }
    let data: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ModelParameters::from_flat(manifest.config, data)?)
}

/// Loads a checkpoint and verifies its config equals `want`, naming the first
/// mismatched field otherwise.
pub fn load_expecting(dir: &Path, want: &ModelConfig) -> Result<ModelParameters<f32>, CheckpointError> {
    let params = load(dir)?;
    let c = &params.config;
    let fields: Vec<(&str, String, String)> = vec![
        ("vocab", c.vocab.to_string(), want.vocab.to_string()),
        ("d_model", c.d_model.to_string(), want.d_model.to_string()),
        ("n_layers", c.n_layers.to_string(), want.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string(), want.n_heads.to_string()),
        ("t_max", c.t_max.to_string(), want.t_max.to_string()),
        ("rope_theta", c.rope_theta.to_string(), want.rope_theta.to_string()),
        ("use_mlp", c.use_mlp.to_string(), want.use_mlp.to_string()),
        ("mlp_hidden", c.mlp_hidden.to_string(), want.mlp_hidden.to_string()),
        ("dropout_rate", c.dropout_rate.to_string(), want.dropout_rate.to_string()),
        ("final_ln", c.final_ln.to_string(), want.final_ln.to_string()),
        ("init_std", c.init_std.to_string(), want.init_std.to_string()),
    ];
    for (field, ckpt, want) in fields {
        if ckpt != want {
            return Err(CheckpointError::ConfigMismatch { field: field.into(), ckpt, want });
        }
    }
    Ok(params)
}

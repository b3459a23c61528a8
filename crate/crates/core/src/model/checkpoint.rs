//! On-disk checkpoint: `<name>.manifest.json` describing every tensor plus a
//! `<name>.bin` blob of little-endian f32 values, row-major, concatenated at
//! the declared byte offsets.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{expected_tensors, Checkpoint, FfnKind, FfnWeights, LayerWeights, ModelConfig, ModelError};
use crate::fsutil::write_atomic;
use crate::numkernel::Matrix;

pub const MANIFEST_FORMAT: &str = "lens-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}.manifest.json")),
        PathBuf::from(format!("{s}.bin")),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<base>.manifest.json` and `<base>.bin`; returns both paths.
pub fn save_checkpoint(ckpt: &Checkpoint, base: &Path) -> Result<(PathBuf, PathBuf), ModelError> {
    let (manifest_path, blob_path) = paths(base);
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in ckpt.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for &v in data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: ckpt.config.clone(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&blob_path, &blob).map_err(io_err(&blob_path))?;
    write_atomic(&manifest_path, &json).map_err(io_err(&manifest_path))?;
    Ok((manifest_path, blob_path))
}

/// Accepts either the base path or the manifest path itself.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let manifest_path = if path.to_string_lossy().ends_with(".manifest.json") {
        path.to_path_buf()
    } else {
        paths(path).0
    };
    let text = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|source| ModelError::Manifest {
            path: manifest_path.display().to_string(),
            source,
        })?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
    from_parts(&manifest, &blob)
}

struct Decoded(HashMap<String, Vec<f64>>);

impl Decoded {
    fn vec(&mut self, name: &str) -> Vec<f64> {
        self.0.remove(name).expect("validated above")
    }

    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.vec(name)).expect("validated above")
    }
}

/// Validates a manifest against its config and decodes the blob.
pub fn from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Checkpoint, ModelError> {
    if manifest.format != MANIFEST_FORMAT {
        return Err(ModelError::UnsupportedManifest(format!(
            "format `{}` (expected `{MANIFEST_FORMAT}`)",
            manifest.format
        )));
    }
    let config = &manifest.config;
    config.validate()?;

    let by_name: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected = expected_tensors(config);
    for t in &manifest.tensors {
        if !expected.iter().any(|(n, _)| n == &t.name) {
            return Err(ModelError::UnexpectedTensor(t.name.clone()));
        }
    }

    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, shape) in &expected {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if &entry.shape != shape {
            return Err(ModelError::ShapeMismatch {
                tensor: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(ModelError::UnsupportedManifest(format!(
                "tensor `{name}` has dtype `{}`",
                entry.dtype
            )));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(ModelError::Truncated {
                tensor: name.clone(),
                start,
                end,
                blob_len: blob.len(),
            });
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        values.insert(name.clone(), data);
    }

    let mut t = Decoded(values);

    let d = config.d_model;
    let f = config.d_ff;
    let embedding = t.mat("embedding", config.vocab_size, d);
    let modality_embedding = t.mat("modality_embedding", 2, d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("layers.{i}.");
        let wq = t.mat(&format!("{p}Wq"), d, d);
        let wk = t.mat(&format!("{p}Wk"), d, d);
        let wv = t.mat(&format!("{p}Wv"), d, d);
        let wo = t.mat(&format!("{p}Wo"), d, d);
        let attn_norm = t.vec(&format!("{p}attn_norm"));
        let ffn_norm = t.vec(&format!("{p}ffn_norm"));
        let ffn = match config.ffn_kind {
            FfnKind::Vanilla => FfnWeights::Vanilla {
                w1: t.mat(&format!("{p}W1"), d, f),
                b1: t.vec(&format!("{p}b1")),
                w2: t.mat(&format!("{p}W2"), f, d),
                b2: t.vec(&format!("{p}b2")),
            },
            FfnKind::Gated => FfnWeights::Gated {
                wg: t.mat(&format!("{p}Wg"), d, f),
                wu: t.mat(&format!("{p}Wu"), d, f),
                wd: t.mat(&format!("{p}Wd"), f, d),
            },
        };
        layers.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            attn_norm,
            ffn_norm,
            ffn,
        });
    }
    let final_norm = t.vec("final_norm");
    let output = t.mat("output", d, config.vocab_size);
    Ok(Checkpoint {
        config: config.clone(),
        embedding,
        modality_embedding,
        layers,
        final_norm,
        output,
    })
}

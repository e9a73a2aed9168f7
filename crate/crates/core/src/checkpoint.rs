//! Self-describing JSON parameter checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolicyParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    /// Free-form tag such as the iteration that produced the checkpoint.
    #[serde(default)]
    label: String,
    tensors: Vec<TensorRecord>,
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, params: &PolicyParams, label: &str) -> Result<()> {
    let tensors = params
        .layout()
        .tensors()
        .iter()
        .map(|(name, range, shape)| TensorRecord {
            name: name.clone(),
            shape: *shape,
            values: params.values()[range.clone()].to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config: *params.config(),
        label: label.to_string(),
        tensors,
    };
    let text = serde_json::to_vec(&file).expect("checkpoint serializes");
    write_atomic(path, &text)
}

/// Loads a checkpoint, checking version, tensor names and shapes.
pub fn load(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&text).map_err(|e| Error::Record {
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let mut params = PolicyParams::zeros(file.config)?;
    let expected: Vec<(String, [usize; 2])> = params
        .layout()
        .tensors()
        .iter()
        .map(|(n, _, s)| (n.clone(), *s))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {} tensors, the model has {}",
            file.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(&file.tensors) {
        if &t.name != name || &t.shape != shape || t.values.len() != shape[0] * shape[1] {
            return Err(Error::invalid(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                t.name, t.shape
            )));
        }
        if t.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("tensor `{name}` holds non-finite values")));
        }
        params
            .tensor_mut(name)
            .expect("layout tensor exists")
            .copy_from_slice(&t.values);
    }
    Ok(params)
}

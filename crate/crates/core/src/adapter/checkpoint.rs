//! Adapter checkpoints: a JSON header next to one `EMBX` container per
//! parameter tensor (stored as `f64`, dtype 1).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdapterConfig, AdapterParams};
use crate::embx::{self, Container};
use crate::error::{Error, Result};
use crate::tensor::RngSeed;

pub const CHECKPOINT_FORMAT: &str = "metaadapter-checkpoint";
pub const HEADER_FILE: &str = "checkpoint.json";

/// Training objective conventions, recorded so reloaded weights are not
/// mistaken for a differently trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub loss: String,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub reduction: String,
}

impl Objective {
    pub fn cross_entropy(temperature: f64) -> Self {
        Objective {
            loss: "cross_entropy".into(),
            temperature,
            label_smoothing: 0.0,
            reduction: "mean".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "m")]
    pub width_mult: usize,
    pub config: AdapterConfig,
    pub seed: RngSeed,
    pub objective: Objective,
    pub param_count: usize,
    pub train_fingerprint: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes the checkpoint into `dir` and returns the header path.
pub fn save_checkpoint(
    dir: &Path,
    params: &AdapterParams,
    seed: RngSeed,
    objective: Objective,
    train_fingerprint: serde_json::Value,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let shapes = params.tensor_shapes();
    let mut write_err = None;
    let mut i = 0;
    params.for_each_tensor(|name, data| {
        let dims = shapes[i].1.clone();
        i += 1;
        let file = format!("{name}.embx");
        if write_err.is_none() {
            if let Err(e) = embx::write(&dir.join(&file), &Container::f64(dims.clone(), data.to_vec())) {
                write_err = Some(e);
            }
        }
        tensors.push(TensorEntry { name, file, dims });
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let c = &params.config;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dim: c.dim,
        heads: c.heads,
        depth: c.depth,
        width_mult: c.width_mult,
        config: c.clone(),
        seed,
        objective,
        param_count: params.param_count(),
        train_fingerprint,
        tensors,
    };
    let path = dir.join(HEADER_FILE);
    let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either the header file or the directory containing it.
fn header_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(HEADER_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(AdapterParams, CheckpointHeader)> {
    let path = header_path(path);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&raw).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let bad = |reason: String| Error::Format { path: path.clone(), reason };
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let c = &header.config;
    if (c.dim, c.heads, c.depth, c.width_mult) != (header.dim, header.heads, header.depth, header.width_mult) {
        return Err(bad("header dimensions disagree with its config".into()));
    }
    let mut params = AdapterParams::init(c, header.seed)?;
    let expected = params.tensor_shapes();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, dims), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *dims != entry.dims {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {name} {dims:?}",
                entry.name, entry.dims
            )));
        }
        let file = dir.join(&entry.file);
        let cont = embx::read(&file)?;
        if cont.dims != *dims {
            return Err(Error::shape(file.display().to_string(), format!("{dims:?}"), format!("{:?}", cont.dims)));
        }
        loaded.push(cont.values_f64());
    }
    let mut it = loaded.into_iter();
    params.for_each_tensor_mut(|_, t| t.copy_from_slice(&it.next().expect("count checked")));
    Ok((params, header))
}

/// SHA-256 over the header bytes followed by every tensor file in order.
pub fn checkpoint_sha256(path: &Path) -> Result<String> {
    let path = header_path(path);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&raw).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(&raw);
    for t in &header.tensors {
        let f = dir.join(&t.file);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::GateMode;

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = AdapterConfig::new(8);
        c.heads = 2;
        c.depth = 2;
        c.gate = GateMode::Elementwise;
        c.value_projection = true;
        let mut p = AdapterParams::init(&c, RngSeed(5)).unwrap();
        p.blocks[1].gate_bias[3] = 0.123_456_789_012_345_6;
        let path = save_checkpoint(
            dir.path(),
            &p,
            RngSeed(5),
            Objective::cross_entropy(100.0),
            serde_json::json!({"note": "test"}),
        )
        .unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(header.param_count, c.param_count());
        assert_eq!(load_checkpoint(dir.path()).unwrap().0, p);
        let h1 = checkpoint_sha256(&path).unwrap();
        assert_eq!(h1.len(), 64);
        assert_eq!(h1, checkpoint_sha256(dir.path()).unwrap());
    }

    #[test]
    fn rejects_mismatched_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = AdapterConfig::new(4);
        c.heads = 2;
        let p = AdapterParams::init(&c, RngSeed(0)).unwrap();
        let path = save_checkpoint(dir.path(), &p, RngSeed(0), Objective::cross_entropy(1.0), serde_json::Value::Null).unwrap();
        embx::write(&dir.path().join("block0.key_proj.embx"), &Container::f64(vec![2, 2], vec![0.0; 4])).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

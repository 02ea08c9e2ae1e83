//! On-disk formats: the weight archive (`manifest.json` + `weights.bin`) and
//! the dataset (`data.json` + `data.bin`).
//!
//! Both blobs are little-endian IEEE-754 f32, concatenated without padding.
//! The `parse_*` functions take raw bytes so that they can be fuzzed
//! without touching the filesystem.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ann_forward, ModelConfig, ModelGraph};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DATA_MANIFEST_FILE: &str = "data.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Reads a whole file, attaching the path to any error.
pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a file, creating parent directories as needed.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Decodes the tensor table of a manifest against its blob.
pub fn decode_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut out = BTreeMap::new();
    let mut cursor = 0u64;
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor '{}' has dtype '{}', only f32 is supported",
                e.name, e.dtype
            )));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor '{}' shape overflows", e.name)))?;
        if e.shape.is_empty() {
            return Err(Error::Format(format!("tensor '{}' has an empty shape", e.name)));
        }
        if count != e.byte_len {
            return Err(Error::Format(format!(
                "tensor '{}' declares shape {:?} ({count} bytes) but byte_len {}",
                e.name, e.shape, e.byte_len
            )));
        }
        if e.byte_offset != cursor {
            return Err(Error::Format(format!(
                "tensor '{}' starts at {} but the previous tensor ends at {cursor}",
                e.name, e.byte_offset
            )));
        }
        let end = cursor
            .checked_add(e.byte_len)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor '{}' runs past the end of a {}-byte blob",
                    e.name,
                    blob.len()
                ))
            })?;
        let values = f32_from_le(&blob[cursor as usize..end as usize]);
        let t =
            Tensor::new(e.shape.clone(), values).map_err(|err| Error::Format(format!("tensor '{}': {err}", e.name)))?;
        if out.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{}'", e.name)));
        }
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest accounts for {cursor}",
            blob.len()
        )));
    }
    Ok(out)
}

/// Lays out tensors back to back; returns the index entries and the blob.
pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Parses a full model archive from the manifest and blob bytes.
pub fn parse_model(manifest: &[u8], blob: &[u8]) -> Result<ModelGraph> {
    let m = parse_manifest(manifest)?;
    let weights = decode_tensors(&m.tensors, blob)?;
    ModelGraph::new(m.config, weights)
}

pub fn encode_model(model: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    let order = model.config.expected_tensors();
    let mut tensors = Vec::with_capacity(order.len());
    for (name, _) in &order {
        tensors.push((name.as_str(), model.weight(name)?));
    }
    let (entries, blob) = encode_tensors(tensors);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: entries,
    };
    Ok((to_json_bytes(&manifest)?, blob))
}

pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<()> {
    let (manifest, blob) = encode_model(model)?;
    write(&dir.join(WEIGHTS_FILE), &blob)?;
    write(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    let manifest = read(&dir.join(MANIFEST_FILE))?;
    let blob = read(&dir.join(WEIGHTS_FILE))?;
    parse_model(&manifest, &blob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub count: usize,
    pub tokens_per_sample: usize,
    pub dim: usize,
    pub labels: Vec<usize>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// Samples of pre-patchified tokens with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokens_per_sample: usize,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub samples: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            tokens_per_sample: self.tokens_per_sample,
            dim: self.dim,
            labels: self.labels[..n].to_vec(),
            samples: self.samples[..n].to_vec(),
        }
    }

    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens_per_sample != config.num_patches() || self.dim != config.in_dim {
            return Err(Error::Validation(format!(
                "dataset samples are {}x{}, model expects {}x{}",
                self.tokens_per_sample,
                self.dim,
                config.num_patches(),
                config.in_dim
            )));
        }
        Ok(())
    }

    /// Gaussian tokens labelled by the model's own prediction.
    pub fn synthetic(model: &ModelGraph, count: usize, seed: u64) -> Result<Dataset> {
        let shape = model.input_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Tensor<f32>> = (0..count)
            .map(|_| Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng)))
            .collect();
        let labels = samples
            .par_iter()
            .map(|s| ann_forward::<f64>(model, &s.cast(), false).map(|o| o.logits.argmax()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            tokens_per_sample: shape[0],
            dim: shape[1],
            labels,
            samples,
        })
    }
}

pub fn parse_dataset(manifest: &[u8], blob: &[u8]) -> Result<Dataset> {
    let m: DatasetManifest =
        serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {}",
            m.format_version
        )));
    }
    if m.labels.len() != m.count {
        return Err(Error::Format(format!(
            "dataset declares {} samples but {} labels",
            m.count,
            m.labels.len()
        )));
    }
    let per_sample = m
        .tokens_per_sample
        .checked_mul(m.dim)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format("dataset sample size is zero or overflows".into()))?;
    let expected = per_sample
        .checked_mul(m.count)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "data.bin holds {} bytes, manifest implies {expected}",
            blob.len()
        )));
    }
    let samples = blob
        .chunks_exact(per_sample * 4)
        .enumerate()
        .map(|(i, chunk)| {
            Tensor::new(vec![m.tokens_per_sample, m.dim], f32_from_le(chunk))
                .map_err(|e| Error::Format(format!("sample {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        tokens_per_sample: m.tokens_per_sample,
        dim: m.dim,
        labels: m.labels,
        samples,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        count: ds.len(),
        tokens_per_sample: ds.tokens_per_sample,
        dim: ds.dim,
        labels: ds.labels.clone(),
    };
    let mut blob = Vec::with_capacity(ds.len() * ds.tokens_per_sample * ds.dim * 4);
    for s in &ds.samples {
        for v in s.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((to_json_bytes(&manifest)?, blob))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let (manifest, blob) = encode_dataset(ds)?;
    write(&dir.join(DATA_FILE), &blob)?;
    write(&dir.join(DATA_MANIFEST_FILE), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read(&dir.join(DATA_MANIFEST_FILE))?;
    let blob = read(&dir.join(DATA_FILE))?;
    parse_dataset(&manifest, &blob)
}

/// Names that appear more than once in a manifest's tensor index.
pub fn duplicate_names(entries: &[TensorEntry]) -> Vec<String> {
    let mut seen = HashSet::new();
    entries
        .iter()
        .filter(|e| !seen.insert(e.name.as_str()))
        .map(|e| e.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            dim: 32,
            ..ModelConfig::toy()
        };
        let m = ModelGraph::random(cfg, 17).unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.config.num_blocks, 2);
        for (name, t) in m.weights() {
            let u = back.weight(name).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        // re-encoding is byte-identical too
        assert_eq!(encode_model(&m).unwrap(), encode_model(&back).unwrap());
    }

    #[test]
    fn size_mismatch_is_a_format_error() {
        let entries = vec![TensorEntry {
            name: "w".into(),
            shape: vec![32, 32],
            dtype: "f32".into(),
            byte_offset: 0,
            byte_len: 32 * 32 * 4,
        }];
        let blob = vec![0u8; 400];
        assert!(matches!(decode_tensors(&entries, &blob), Err(Error::Format(_))));
    }

    #[test]
    fn gaps_duplicates_and_dtype_are_rejected() {
        let (mut entries, blob) =
            encode_tensors([("a", &Tensor::<f32>::zeros(&[2])), ("b", &Tensor::<f32>::zeros(&[3]))]);
        assert!(decode_tensors(&entries, &blob).is_ok());
        entries[1].byte_offset += 4;
        assert!(matches!(decode_tensors(&entries, &blob), Err(Error::Format(_))));
        entries[1].byte_offset -= 4;
        entries[1].name = "a".into();
        assert_eq!(duplicate_names(&entries), vec!["a".to_string()]);
        assert!(matches!(decode_tensors(&entries, &blob), Err(Error::Format(_))));
        entries[1].name = "b".into();
        entries[0].dtype = "f16".into();
        assert!(matches!(decode_tensors(&entries, &blob), Err(Error::Format(_))));
    }

    #[test]
    fn nan_in_blob_is_rejected() {
        let (entries, mut blob) = encode_tensors([("a", &Tensor::<f32>::zeros(&[2]))]);
        blob[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensors(&entries, &blob), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelGraph::random(ModelConfig::toy(), 1).unwrap();
        let ds = Dataset::synthetic(&m, 5, 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(back.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn dataset_label_count_mismatch() {
        let json = br#"{"count":2,"tokens_per_sample":1,"dim":1,"labels":[0]}"#;
        assert!(matches!(parse_dataset(json, &[0u8; 8]), Err(Error::Format(_))));
        let json = br#"{"count":1,"tokens_per_sample":1,"dim":1,"labels":[0]}"#;
        assert!(matches!(parse_dataset(json, &[0u8; 8]), Err(Error::Format(_))));
        assert!(parse_dataset(json, &[0u8; 4]).is_ok());
    }
}

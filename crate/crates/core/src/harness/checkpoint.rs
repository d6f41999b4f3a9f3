//! Binary checkpoint format.
//!
//! ```text
//! magic "MMOODCKP" | version u32 LE | manifest length u64 LE | manifest JSON
//! | tensor data (f64 LE, manifest order) | SHA-256 of everything before
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{BatchInputs, ModelSpec, Objective, WoodModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MMOODCKP";
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: ModelSpec,
    objective: Objective,
    config: Option<ExperimentConfig>,
    epoch: usize,
    loss_history: Vec<f64>,
    fusion_order: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: WoodModel,
    pub config: Option<ExperimentConfig>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

pub fn save_checkpoint(
    model: &WoodModel,
    config: Option<&ExperimentConfig>,
    epoch: usize,
    loss_history: &[f64],
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(model.num_params() * 8);
    for (name, layer) in model.layers() {
        tensors.push(TensorEntry { name: format!("{name}.weight"), shape: layer.weight.shape().to_vec() });
        tensors.push(TensorEntry { name: format!("{name}.bias"), shape: layer.bias.shape().to_vec() });
        for x in layer.weight.iter().chain(layer.bias.iter()) {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        spec: model.spec.clone(),
        objective: model.objective,
        config: config.cloned(),
        epoch,
        loss_history: loss_history.to_vec(),
        fusion_order: vec!["image".into(), "text".into()],
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + json.len() + data.len() + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file or truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupt)".into()));
    }
    let json_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body.get(HEADER_LEN..HEADER_LEN.saturating_add(json_len)).ok_or_else(|| fail("manifest overruns file".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| fail(format!("manifest: {e}")))?;
    if manifest.fusion_order != ["image", "text"] {
        return Err(fail(format!("unsupported fusion order {:?}", manifest.fusion_order)));
    }

    let mut model = WoodModel::new(manifest.spec.clone(), manifest.objective, 0).map_err(|e| fail(e.to_string()))?;
    let names: Vec<String> = model.layers().iter().map(|(n, _)| n.clone()).collect();
    if manifest.tensors.len() != 2 * names.len() {
        return Err(fail(format!("expected {} tensors, found {}", 2 * names.len(), manifest.tensors.len())));
    }
    let mut data = &body[HEADER_LEN + json_len..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if data.len() < n * 8 {
            return Err(fail("tensor data truncated".into()));
        }
        let (head, rest) = data.split_at(n * 8);
        data = rest;
        Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    for (i, layer) in model.layers_mut().into_iter().enumerate() {
        let (w, b) = (&manifest.tensors[2 * i], &manifest.tensors[2 * i + 1]);
        if w.name != format!("{}.weight", names[i]) || b.name != format!("{}.bias", names[i]) {
            return Err(fail(format!("unexpected tensor {:?} at position {}", w.name, 2 * i)));
        }
        if w.shape != layer.weight.shape() || b.shape != layer.bias.shape() {
            return Err(fail(format!("shape mismatch for {}", names[i])));
        }
        let weight = take(layer.weight.len())?;
        layer.weight = Array2::from_shape_vec(layer.weight.raw_dim(), weight).map_err(|e| fail(e.to_string()))?;
        layer.bias = take(layer.bias.len())?.into();
    }
    if !data.is_empty() {
        return Err(fail(format!("{} trailing bytes", data.len())));
    }
    Ok(Checkpoint { model, config: manifest.config, epoch: manifest.epoch, loss_history: manifest.loss_history })
}

/// Fixed random batch for comparing model outputs across save/load or runs.
pub fn probe_batch(spec: &ModelSpec, n: usize, seed: u64) -> BatchInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |cols: usize| Array2::from_shape_fn((n, cols), |_| StandardNormal.sample(&mut rng));
    let images = draw(spec.image_input_dim);
    let texts = draw(spec.text_input_dim);
    BatchInputs { images, texts, ood_flags: (0..n).map(|i| i % 4 == 3).collect() }
}

//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json   format tag, config echo, vocabulary hash, tensor table, metric history
//! config.txt      the effective run configuration
//! vocab.json      vocabulary snapshot
//! tensors/*.f32   one little-endian f32 blob per named tensor
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, TrainedModel};
use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Result, TulError};
use crate::model::TulModel;
use crate::nn::Parameters;

pub const FORMAT: &str = "tul-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: Vec<String>,
    pub vocab_sha256: String,
    pub num_users: usize,
    pub num_pois: usize,
    pub num_categories: usize,
    pub num_time_slices: usize,
    pub tensors: Vec<TensorEntry>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc1: f64,
}

fn ck(msg: impl Into<String>) -> TulError {
    TulError::Checkpoint(msg.into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TulError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TulError::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `model` with the data and synth sections of `run`; the training
/// section always comes from the model itself.
pub fn save_checkpoint(dir: &Path, model: &TrainedModel, run: &RunConfig) -> Result<()> {
    let mut run = run.clone();
    run.train = model.config.clone();
    let tensor_dir = dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| TulError::io(&tensor_dir, e))?;

    let mut tensors = Vec::new();
    for (name, view) in model.model.named_params() {
        let bytes: Vec<u8> = view.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("tensors/{name}.f32");
        write(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            shape: view.shape().to_vec(),
            file,
            sha256: hex(&bytes),
        });
    }

    let config = run.to_text();
    write(&dir.join("config.txt"), config.as_bytes())?;
    write(&dir.join("vocab.json"), &serde_json::to_vec(&model.vocab)?)?;
    let v = &model.vocab;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: config.lines().map(String::from).collect(),
        vocab_sha256: v.fingerprint(),
        num_users: v.num_users(),
        num_pois: v.num_pois(),
        num_categories: v.num_categories(),
        num_time_slices: v.num_time_slices(),
        tensors,
        history: model.history.clone(),
        best_epoch: model.best_epoch,
        best_val_acc1: model.best_val_acc1,
    };
    write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainedModel, RunConfig)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)
        .map_err(|e| ck(format!("{}: {e}", dir.join("manifest.json").display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(ck(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let run = RunConfig::parse(&manifest.config.join("\n"))?;
    run.validate()?;
    let vocab: Vocabulary = serde_json::from_slice(&read(&dir.join("vocab.json"))?)
        .map_err(|e| ck(format!("vocab.json: {e}")))?;
    if vocab.fingerprint() != manifest.vocab_sha256 {
        return Err(ck("vocab.json does not match the manifest hash"));
    }

    let mut model = TulModel::new(&mut ChaCha8Rng::seed_from_u64(0), &run.train.model, &vocab);
    let mut seen = 0;
    for (name, mut view) in model.named_params_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ck(format!("tensor {name} missing")))?;
        if entry.shape != view.shape() {
            return Err(ck(format!(
                "tensor {name}: stored shape {:?}, model expects {:?}",
                entry.shape,
                view.shape()
            )));
        }
        let bytes = read(&dir.join(&entry.file))?;
        if bytes.len() != 4 * view.len() || hex(&bytes) != entry.sha256 {
            return Err(ck(format!("tensor {name}: blob is corrupt")));
        }
        for (dst, chunk) in view.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        seen += 1;
    }
    if seen != manifest.tensors.len() {
        return Err(ck("checkpoint holds tensors the model does not have"));
    }
    if !model.all_finite() {
        return Err(ck("checkpoint holds non-finite parameters"));
    }
    let trained = TrainedModel {
        model,
        vocab,
        config: run.train.clone(),
        history: manifest.history,
        best_epoch: manifest.best_epoch,
        best_val_acc1: manifest.best_val_acc1,
    };
    Ok((trained, run))
}

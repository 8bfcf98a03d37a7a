//! Safetensors checkpoints. Tensors are stored as f32; configuration,
//! vocabulary and provenance live in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::init::SeededVarMap;
use super::{DiffusionError, DiffusionModel, ModelConfig, ScheduleConfig};
use crate::coords::QuantizerConfig;
use crate::query::Vocabulary;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "layoutdiff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocabulary: Vocabulary,
    pub quantizer: QuantizerConfig,
    pub schedule: ScheduleConfig,
    /// Hash of the training dataset manifest, when trained on one.
    pub manifest_hash: Option<String>,
    pub train_steps: usize,
}

impl DiffusionModel {
    /// Serializes every parameter plus metadata; returns the sha256 of the bytes written.
    pub fn save(&self, path: &Path, manifest_hash: Option<&str>, train_steps: usize) -> Result<String, DiffusionError> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.config().clone(),
            vocabulary: self.vocab().clone(),
            quantizer: self.config().quantizer.clone(),
            schedule: self.config().schedule.clone(),
            manifest_hash: manifest_hash.map(str::to_string),
            train_steps,
        };
        let data = self.var_map().data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let tensors = names
            .iter()
            .map(|n| Ok(((*n).clone(), data[*n].as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<Vec<(String, Tensor)>, DiffusionError>>()?;
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        let bytes = safetensors::serialize(tensors, Some(info)).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Loads a checkpoint, checking its metadata is self-consistent and
    /// every tensor matches the architecture it describes.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta), DiffusionError> {
        let bytes = std::fs::read(path)?;
        let ck = |m: String| DiffusionError::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| ck("missing model metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ck(format!("format version {} (expected {CHECKPOINT_FORMAT_VERSION})", meta.format_version)));
        }
        if meta.quantizer != meta.model.quantizer || meta.vocabulary.n_bins() != meta.quantizer.n_bins() {
            return Err(ck("quantizer and vocabulary disagree".into()));
        }
        if meta.schedule != meta.model.schedule {
            return Err(ck("schedule constants disagree with model config".into()));
        }
        meta.model.validate()?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let vars = SeededVarMap::new(0);
        let model = DiffusionModel::from_parts(vars.clone(), meta.model.clone(), meta.vocabulary.clone(), dtype, device)?;
        let mut expected: Vec<String> = vars.map.data().lock().unwrap().keys().cloned().collect();
        expected.sort();
        let mut found: Vec<String> = tensors.keys().cloned().collect();
        found.sort();
        if expected != found {
            return Err(ck("parameter names do not match the architecture".into()));
        }
        for (name, t) in tensors {
            let data = vars.map.data().lock().unwrap();
            let var = &data[&name];
            if var.shape() != t.shape() {
                return Err(ck(format!("{name}: shape {:?} but architecture needs {:?}", t.shape(), var.shape())));
            }
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok((model, meta))
    }

    /// Like [`DiffusionModel::load`], but fails unless the checkpoint was
    /// built for exactly this vocabulary and quantizer.
    pub fn load_expecting(
        path: &Path,
        vocab: &Vocabulary,
        quantizer: &QuantizerConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, CheckpointMeta), DiffusionError> {
        let (model, meta) = Self::load(path, dtype, device)?;
        if &meta.quantizer != quantizer {
            return Err(DiffusionError::Checkpoint(format!(
                "checkpoint quantizer has {} bins, expected {}",
                meta.quantizer.n_bins(),
                quantizer.n_bins()
            )));
        }
        if meta.vocabulary.fingerprint() != vocab.fingerprint() {
            return Err(DiffusionError::Checkpoint("checkpoint vocabulary differs from the expected one".into()));
        }
        Ok((model, meta))
    }
}

/// sha256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, DiffusionError> {
    Ok(bytes_hash(&std::fs::read(path)?))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

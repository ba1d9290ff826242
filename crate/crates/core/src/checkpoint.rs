//! Checkpoint directories: `config.json` plus one safetensors file per component.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::corpus::GrainConfig;
use crate::dsp::SpectralLossConfig;
use crate::error::{Error, Result};
use crate::model::{GrainVae, ModelConfig};
use crate::nn::{parameter_count, SeededVars};
use crate::temporal::SequenceVae;

pub const CONFIG_FILE: &str = "config.json";
pub const GRAIN_WEIGHTS: &str = "grain.safetensors";
pub const TEMPORAL_WEIGHTS: &str = "temporal.safetensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub grain: GrainConfig,
    pub model: ModelConfig,
    pub label_schema: Vec<String>,
    pub loss: SpectralLossConfig,
}

impl CheckpointConfig {
    pub fn new(grain: GrainConfig, mut model: ModelConfig, label_schema: Vec<String>, loss: SpectralLossConfig) -> Self {
        if model.num_classes > 0 && model.num_classes != label_schema.len() {
            model.num_classes = label_schema.len();
        }
        Self {
            format_version: FORMAT_VERSION,
            grain,
            model,
            label_schema,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grain.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.num_classes > 0 && self.model.num_classes != self.label_schema.len() {
            return Err(Error::Config(format!(
                "{} condition classes but {} labels",
                self.model.num_classes,
                self.label_schema.len()
            )));
        }
        Ok(())
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.label_schema
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

/// Grain VAE and sequence model with their variable stores.
pub struct GranularModel {
    pub config: CheckpointConfig,
    pub grain: GrainVae,
    pub temporal: SequenceVae,
    grain_vars: VarMap,
    temporal_vars: VarMap,
}

impl GranularModel {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: CheckpointConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let grain_vars = VarMap::new();
        let temporal_vars = VarMap::new();
        let grain = GrainVae::new(
            &config.grain,
            &config.model,
            SeededVars::builder(&grain_vars, seed, dtype, device),
        )?;
        let temporal = SequenceVae::new(&config.model, SeededVars::builder(&temporal_vars, seed, dtype, device))?;
        Ok(Self {
            config,
            grain,
            temporal,
            grain_vars,
            temporal_vars,
        })
    }

    pub fn grain_vars(&self) -> &VarMap {
        &self.grain_vars
    }

    pub fn temporal_vars(&self) -> &VarMap {
        &self.temporal_vars
    }

    pub fn grain_parameter_count(&self) -> usize {
        parameter_count(&self.grain_vars)
    }

    pub fn dtype(&self) -> DType {
        self.grain.dtype()
    }

    pub fn device(&self) -> &Device {
        self.grain.device()
    }

    pub fn is_conditional(&self) -> bool {
        self.config.model.is_conditional()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        save_vars(&self.grain_vars, &dir.join(GRAIN_WEIGHTS))?;
        save_vars(&self.temporal_vars, &dir.join(TEMPORAL_WEIGHTS))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let config = load_config(dir)?;
        let model = Self::new(config, 0, dtype, device)?;
        load_vars(&model.grain_vars, &dir.join(GRAIN_WEIGHTS), device)?;
        load_vars(&model.temporal_vars, &dir.join(TEMPORAL_WEIGHTS), device)?;
        Ok(model)
    }
}

pub fn load_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let config: CheckpointConfig = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path,
            detail: format!("unsupported format version {}", config.format_version),
        });
    }
    Ok(config)
}

fn save_vars(map: &VarMap, path: &Path) -> Result<()> {
    let data = map.data().lock().unwrap();
    let tensors: HashMap<String, Tensor> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

fn load_vars(map: &VarMap, path: &Path, device: &Device) -> Result<()> {
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let stored = candle_core::safetensors::load(path, device).map_err(|e| bad(e.to_string()))?;
    let data = map.data().lock().unwrap();
    for (name, var) in data.iter() {
        let t = stored.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CheckpointConfig {
        let grain = GrainConfig::new(64, 0.75, 8000, 4).unwrap();
        let model = ModelConfig {
            latent_dim: 4,
            embedding_dim: 3,
            encoder_channels: vec![4, 8],
            encoder_hidden: 16,
            decoder_hidden: 16,
            postprocess_taps: 8,
            postprocess_channels: 2,
            temporal_hidden: 8,
            ..Default::default()
        };
        CheckpointConfig::new(grain, model, vec![], SpectralLossConfig::for_grain(64, 8000))
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = GranularModel::new(tiny(), 11, DType::F32, &Device::Cpu).unwrap();
        a.save(dir.path()).unwrap();
        let b = GranularModel::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.config, b.config);
        let z = Tensor::ones((4, 4), DType::F32, &Device::Cpu).unwrap();
        let wa: Vec<f32> = a.grain.decode(&z, None, 3).unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.grain.decode(&z, None, 3).unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn seeds_give_distinct_weights() {
        let a = GranularModel::new(tiny(), 1, DType::F32, &Device::Cpu).unwrap();
        let b = GranularModel::new(tiny(), 2, DType::F32, &Device::Cpu).unwrap();
        let z = Tensor::ones((4, 4), DType::F32, &Device::Cpu).unwrap();
        let wa: Vec<f32> = a.grain.decode(&z, None, 3).unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.grain.decode(&z, None, 3).unwrap().to_vec1().unwrap();
        assert_ne!(wa, wb);
    }

    #[test]
    fn missing_dir_is_checkpoint_error() {
        let err = GranularModel::load("/nonexistent/ckpt", DType::F32, &Device::Cpu).err().unwrap();
        assert_eq!(err.kind(), "checkpoint");
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::adapter::AdapterState;
use crate::backbone::FrozenBackbone;
use crate::classifier::ClassifierState;
use crate::data_schema::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Heatmap,
    Classifier,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Heatmap => "heatmap",
            Stage::Classifier => "classifier",
        }
    }
}

/// Sidecar of a saved parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the shape-determining configuration; checked on load.
    pub model_hash: String,
    pub param_checksum: String,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, iteration: usize, config: &PipelineConfig, params: &ParamStore) -> Self {
        Self {
            stage,
            iteration,
            seed: config.seed,
            config_hash: config.hash(),
            model_hash: config.model_hash(),
            param_checksum: params.checksum(),
        }
    }
}

/// Writes `params.bin` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("params.bin");
    std::fs::write(&path, params.to_bytes()).map_err(|e| Error::io(&path, e))?;
    write_json(meta, dir.join("checkpoint.json"))
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let meta: CheckpointMeta = read_json(dir.join("checkpoint.json"))?;
    let path = dir.join("params.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let params = ParamStore::from_bytes(&bytes)?;
    if params.checksum() != meta.param_checksum {
        return Err(Error::Checkpoint(format!(
            "{}: parameter checksum mismatch",
            dir.display()
        )));
    }
    Ok((meta, params))
}

fn check(meta: &CheckpointMeta, stage: Stage, config: &PipelineConfig, dir: &Path) -> Result<()> {
    if meta.stage != stage {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {} checkpoint, found {}",
            dir.display(),
            stage.as_str(),
            meta.stage.as_str()
        )));
    }
    if meta.model_hash != config.model_hash() {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint was trained with a different model configuration",
            dir.display()
        )));
    }
    Ok(())
}

pub fn load_adapter(
    dir: &Path,
    config: &PipelineConfig,
    backbone: &FrozenBackbone,
) -> Result<(CheckpointMeta, AdapterState)> {
    let (meta, params) = load_checkpoint(dir)?;
    check(&meta, Stage::Heatmap, config, dir)?;
    let mut state = AdapterState::for_backbone(config.adapter.clone(), backbone)?;
    state.params_mut().load_from(params)?;
    Ok((meta, state))
}

pub fn load_classifier(
    dir: &Path,
    config: &PipelineConfig,
    backbone: &FrozenBackbone,
) -> Result<(CheckpointMeta, ClassifierState)> {
    let (meta, params) = load_checkpoint(dir)?;
    check(&meta, Stage::Classifier, config, dir)?;
    let mut state = ClassifierState::zeros(backbone.channels());
    state.params_mut().load_from(params)?;
    Ok((meta, state))
}

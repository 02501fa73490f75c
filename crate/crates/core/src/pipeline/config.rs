use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::data_schema::{Setting, SynthConfig, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::gazeprep::{SplitSpec, DEFAULT_RADIUS};
use crate::losses::{LossWeights, DEFAULT_EPS};
use crate::nn::AdamWConfig;

/// Where inputs come from and how ground truth is rendered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Study directory; `None` means generate a synthetic corpus.
    pub dir: Option<PathBuf>,
    /// Number of synthetic studies when `dir` is unset.
    pub synth_count: usize,
    /// Square side images and heatmaps are downsampled to for training.
    pub train_size: usize,
    /// Truncation radius of the fixation kernel, in source pixels.
    pub radius: f64,
    /// Optional keyword table (JSON); built-in table otherwise.
    pub keywords: Option<PathBuf>,
    /// Wording of the heart target inside the prompt.
    pub heart_phrase: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth_count: 200,
            train_size: 224,
            radius: DEFAULT_RADIUS,
            keywords: None,
            heart_phrase: "heart".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            eps: DEFAULT_EPS,
        }
    }
}

/// Stage-1 (heatmap) training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Validation period in iterations; 0 validates only at the end.
    pub eval_every: usize,
    /// Global gradient-norm clip; off unless set.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            eval_every: 200,
            clip_grad_norm: None,
        }
    }
}

/// Heatmaps used to mask images for the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Predicted,
    GroundTruth,
}

/// Stage-2 (classifier head) training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    pub mask_source: MaskSource,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 500,
            eval_every: 50,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            mask_source: MaskSource::Predicted,
        }
    }
}

/// Everything a run needs. The top-level `seed` drives synthesis, splits,
/// adapter and head initialization, and batch order; the backbone keeps its
/// own seed because it stands in for fixed pretrained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub setting: Setting,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            setting: Setting::M,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            optimizer: AdamWConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.set_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the master seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = seed;
        self.adapter.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.split.validate()?;
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.loss.weights.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.train_size == 0 || !d.train_size.is_multiple_of(PATCH_SIZE) {
            return bad(format!(
                "data.train_size {} must be a positive multiple of {PATCH_SIZE}",
                d.train_size
            ));
        }
        if d.dir.is_none() && !self.synth.image_size.is_multiple_of(d.train_size) {
            return bad(format!(
                "synth.image_size {} must be a multiple of data.train_size {}",
                self.synth.image_size, d.train_size
            ));
        }
        if !(d.radius > 0.0) {
            return bad("data.radius must be positive".into());
        }
        if !(self.loss.eps > 0.0 && self.loss.eps < 0.5) {
            return bad("loss.eps must lie in (0, 0.5)".into());
        }
        for (name, o) in [
            ("optimizer", &self.optimizer),
            ("classifier.optimizer", &self.classifier.optimizer),
        ] {
            if !(o.lr > 0.0)
                || !(o.weight_decay >= 0.0)
                || !(0.0..1.0).contains(&o.beta1)
                || !(0.0..1.0).contains(&o.beta2)
            {
                return bad(format!(
                    "{name}: lr must be positive, betas in [0, 1), weight_decay >= 0"
                ));
            }
        }
        if self.train.batch_size == 0 || self.train.iterations == 0 {
            return bad("train.batch_size and train.iterations must be positive".into());
        }
        if self.classifier.batch_size == 0 || self.classifier.iterations == 0 {
            return bad("classifier.batch_size and classifier.iterations must be positive".into());
        }
        if let Some(c) = self.train.clip_grad_norm {
            if !(c > 0.0) {
                return bad("train.clip_grad_norm must be positive".into());
            }
        }
        Ok(())
    }

    /// Stable digest of everything that affects results; the output directory is
    /// excluded so relocated runs keep their identity.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Digest of the parts that determine parameter shapes and inputs; a
    /// checkpoint can be reused by any config with the same model hash.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_string(&(
            &self.backbone,
            &self.adapter.depth,
            &self.adapter.dim,
            &self.adapter.heads,
            &self.adapter.decoder_depth,
            &self.adapter.decoder_hidden,
            &self.adapter.decoder_out,
            &self.adapter.decoder,
            self.data.train_size,
        ))
        .expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_use_defaults() {
        let c = PipelineConfig::from_toml("seed = 5\nsetting = \"L\"\n[train]\niterations = 10\n").unwrap();
        assert_eq!(c.setting, Setting::L);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.adapter.seed, 5);
        assert_eq!(c.split.seed, 5);
        assert_eq!(c.optimizer.lr, 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[data]\ntrain_size = 100").is_err());
        assert!(PipelineConfig::from_toml("[loss]\neps = 0.7").is_err());
        assert!(PipelineConfig::from_toml("[loss.weights]\nl2 = -1.0").is_err());
        assert!(PipelineConfig::from_toml("[adapter]\nheads = 7").is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.train.iterations += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.model_hash(), b.model_hash());
        b.adapter.dim = 120;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}

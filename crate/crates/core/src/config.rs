//! Run configuration: one TOML file covering every stage of the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::{CnnConfig, TrainRecipe};
use crate::datastore::{PromptConfig, SplitSpec};
use crate::eventgen::GeneratorConfig;
use crate::vlm::{AdapterConfig, BackboneConfig, SftRecipe};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("config schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub n_events: u64,
    pub shard_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_events: 10_000, shard_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnSection {
    pub model: CnnConfig,
    pub recipe: TrainRecipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmSection {
    pub adapter: AdapterConfig,
    pub recipe: SftRecipe,
    /// Overrides the preset shape of `adapter.base_model_id`.
    pub backbone: Option<BackboneConfig>,
    pub prompt: PromptConfig,
    /// Decoding temperature applied to the label log-probabilities.
    pub temperature: f64,
    /// Uses at most this many training events for fine-tuning.
    pub max_train_records: Option<usize>,
}

impl Default for VlmSection {
    fn default() -> Self {
        // Rank 8 keeps the adapters under the trainable-fraction cap on the
        // small stand-in backbone; rank 16 fits only the large preset.
        let adapter = AdapterConfig { lora_rank: 8, lora_alpha: 16.0, ..AdapterConfig::default() };
        Self {
            adapter,
            recipe: SftRecipe::default(),
            backbone: None,
            prompt: PromptConfig::default(),
            temperature: 5.0,
            max_train_records: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_warmup: usize,
    pub n_measure: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_warmup: 3, n_measure: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed; `apply_seed` propagates it to every stage.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub dataset: DatasetSection,
    pub split: SplitSpec,
    pub cnn: CnnSection,
    pub vlm: VlmSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            generator: GeneratorConfig::default(),
            dataset: DatasetSection::default(),
            split: SplitSpec::default(),
            cnn: CnnSection::default(),
            vlm: VlmSection::default(),
            eval: EvalSection::default(),
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), reason: e.to_string() })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema { found: cfg.schema_version });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Derives every stage seed from `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        use crate::seed::derive;
        self.seed = seed;
        self.generator.base_seed = seed;
        self.split.split_seed = derive(seed, &[1]);
        self.cnn.recipe.seed = derive(seed, &[2]);
        self.vlm.recipe.seed = derive(seed, &[3]);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.generator.validate().map_err(|e| inv(&e))?;
        self.split.validate().map_err(|e| inv(&e))?;
        self.cnn.model.validate().map_err(|e| inv(&e))?;
        self.cnn.recipe.validate().map_err(|e| inv(&e))?;
        self.vlm.adapter.validate().map_err(|e| inv(&e))?;
        self.vlm.recipe.validate().map_err(|e| inv(&e))?;
        if let Some(b) = &self.vlm.backbone {
            b.validate().map_err(|e| inv(&e))?;
        }
        self.vlm.prompt.system_text().map_err(|e| inv(&e))?;
        self.vlm.prompt.user_text().map_err(|e| inv(&e))?;
        if !(self.vlm.temperature > 0.0 && self.vlm.temperature.is_finite()) {
            return Err(ConfigError::Invalid(format!("temperature must be positive, got {}", self.vlm.temperature)));
        }
        if self.dataset.shard_size == 0 {
            return Err(ConfigError::Invalid("dataset.shard_size must be positive".into()));
        }
        if self.eval.n_measure == 0 {
            return Err(ConfigError::Invalid("eval.n_measure must be positive".into()));
        }
        if self.cnn.model.input_size != self.generator.geometry.crop_size {
            return Err(ConfigError::Invalid(format!(
                "cnn.model.input_size {} differs from generator crop_size {}",
                self.cnn.model.input_size, self.generator.geometry.crop_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("schema_version = 1\n[cnn.recipe]\nlearning_rate = 0.001\n", Path::new("mem"))
            .unwrap();
        assert_eq!(cfg.cnn.recipe.learning_rate, 1e-3);
        assert_eq!(cfg.cnn.recipe.batch_size, TrainRecipe::default().batch_size);
        assert_eq!(cfg.generator, RunConfig::default().generator);
    }

    #[test]
    fn rejects_other_schema_and_unknown_syntax() {
        assert!(matches!(RunConfig::from_toml_str("schema_version = 2", Path::new("m")), Err(ConfigError::Schema { found: 2 })));
        assert!(matches!(RunConfig::from_toml_str("schema_version = [", Path::new("m")), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.apply_seed(1);
        b.apply_seed(2);
        assert_ne!(a.generator.base_seed, b.generator.base_seed);
        assert_ne!(a.split.split_seed, b.split.split_seed);
        assert_ne!(a.cnn.recipe.seed, b.cnn.recipe.seed);
        assert_ne!(a.vlm.recipe.seed, b.vlm.recipe.seed);
    }

    #[test]
    fn shipped_configs_parse() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["default.toml", "llama-11b-vision.toml", "toy.toml"] {
            RunConfig::load(&root.join(name)).unwrap().validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
